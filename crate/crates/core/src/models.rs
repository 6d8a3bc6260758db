//! Backbones, classifier heads and the bundled model.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Array4, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TensorFile;
use crate::error::{CirlError, Result};
use crate::mask::Masker;
use crate::nn::{
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d, Mode, Param, Residual, Sequential,
    TensorVisitor, TensorVisitorMut,
};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Four 3x3 conv blocks on 32x32 inputs.
    ConvnetDigits,
    Resnet18,
    Resnet50,
    /// Flatten followed by one affine map; a small toy for tests and probes.
    Linear,
}

impl Backbone {
    pub fn default_feature_dim(self) -> usize {
        match self {
            Backbone::ConvnetDigits => 256,
            Backbone::Resnet18 => 512,
            Backbone::Resnet50 => 2048,
            Backbone::Linear => 16,
        }
    }

    /// Square input side the backbone is usually fed.
    pub fn default_image_size(self) -> usize {
        match self {
            Backbone::ConvnetDigits | Backbone::Linear => 32,
            Backbone::Resnet18 | Backbone::Resnet50 => 224,
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::ConvnetDigits => "convnet_digits",
            Backbone::Resnet18 => "resnet18",
            Backbone::Resnet50 => "resnet50",
            Backbone::Linear => "linear",
        })
    }
}

impl FromStr for Backbone {
    type Err = CirlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet" | "convnet_digits" => Ok(Backbone::ConvnetDigits),
            "resnet18" => Ok(Backbone::Resnet18),
            "resnet50" => Ok(Backbone::Resnet50),
            "linear" => Ok(Backbone::Linear),
            other => Err(CirlError::config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub pretrained: bool,
    /// Weight file for `pretrained` backbones.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Expected SHA-256 of the weight file, hex encoded.
    #[serde(default)]
    pub weights_sha256: Option<String>,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub image_size: usize,
}

fn default_true() -> bool {
    true
}

fn default_channels() -> usize {
    3
}

impl ModelSpec {
    pub fn new(backbone: Backbone, num_classes: usize) -> Self {
        Self {
            backbone,
            feature_dim: backbone.default_feature_dim(),
            num_classes,
            pretrained: false,
            weights_path: None,
            weights_sha256: None,
            batch_norm: true,
            in_channels: 3,
            image_size: backbone.default_image_size(),
        }
    }

    pub fn with_feature_dim(mut self, n: usize) -> Self {
        self.feature_dim = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 || self.in_channels == 0 || self.image_size == 0 {
            return Err(CirlError::config("model dimensions must be positive"));
        }
        match self.backbone {
            Backbone::ConvnetDigits => {
                if self.feature_dim % 4 != 0 {
                    return Err(CirlError::config(format!(
                        "convnet feature_dim must be 4 x channel width, got {}",
                        self.feature_dim
                    )));
                }
                if self.image_size != 32 {
                    return Err(CirlError::config(format!(
                        "convnet expects 32x32 inputs, got {0}x{0}",
                        self.image_size
                    )));
                }
            }
            Backbone::Resnet18 | Backbone::Resnet50 => {
                if self.feature_dim != self.backbone.default_feature_dim() {
                    return Err(CirlError::config(format!(
                        "{} emits {} features, got feature_dim {}",
                        self.backbone,
                        self.backbone.default_feature_dim(),
                        self.feature_dim
                    )));
                }
                if self.image_size < 32 {
                    return Err(CirlError::config("resnet inputs must be at least 32x32"));
                }
            }
            Backbone::Linear => {}
        }
        Ok(())
    }
}

/// Representation generator: images `[B, C, H, W]` to features `[B, N]`.
#[derive(Clone, Debug)]
pub struct Generator<F> {
    pub spec: ModelSpec,
    pub net: Sequential<F>,
}

impl<F: Real> Generator<F> {
    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.in_channels || h != self.spec.image_size || w != self.spec.image_size {
            return Err(CirlError::config(format!(
                "{} expects {}x{s}x{s} inputs, got {c}x{h}x{w}",
                self.spec.backbone,
                self.spec.in_channels,
                s = self.spec.image_size
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: Array4<F>, mode: Mode) -> Result<Array2<F>> {
        self.check_input(&x)?;
        let y = self.net.forward(x.into_dyn(), mode);
        Ok(y.into_dimensionality::<Ix2>().expect("generator emits 2-d features"))
    }

    /// Backward from feature gradients; the input gradient is never needed.
    pub fn backward(&mut self, grad: Array2<F>) {
        self.net.backward(grad.into_dyn(), false);
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.net.params_mut(out);
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        self.net.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        self.net.visit_mut(prefix, f);
    }
}

/// Four `conv3x3 → BN → ReLU → maxpool2` blocks with `feature_dim / 4`
/// channels each; on 32x32 inputs the flattened output has `feature_dim`
/// entries (32 → 16 → 8 → 4 → 2 spatially).
///
/// ReLU is applied after the pool; max-pooling commutes with the monotone
/// ReLU so the function is the same, on a quarter of the elements.
pub fn build_convnet<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Generator<F>> {
    spec.validate()?;
    if spec.backbone != Backbone::ConvnetDigits {
        return Err(CirlError::config(format!("build_convnet called with {}", spec.backbone)));
    }
    let width = spec.feature_dim / 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c = spec.in_channels;
    for _ in 0..4 {
        layers.push(Layer::Conv(Conv2d::new(c, width, 3, 1, 1, !spec.batch_norm, &mut rng)));
        if spec.batch_norm {
            layers.push(Layer::BatchNorm(BatchNorm2d::new(width)));
        }
        layers.push(Layer::MaxPool(MaxPool2d::new(2, 2, 0)));
        layers.push(Layer::relu());
        c = width;
    }
    layers.push(Layer::Flatten(Flatten::default()));
    Ok(Generator {
        spec: spec.clone(),
        net: Sequential::new(layers),
    })
}

/// Flatten plus one affine map to `feature_dim`.
pub fn build_linear<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Generator<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = spec.in_channels * spec.image_size * spec.image_size;
    Ok(Generator {
        spec: spec.clone(),
        net: Sequential::new(vec![
            Layer::Flatten(Flatten::default()),
            Layer::Linear(Linear::new(inputs, spec.feature_dim, &mut rng)),
        ]),
    })
}

fn conv_bn<F: Real>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> [Layer<F>; 2] {
    [
        Layer::Conv(Conv2d::new(cin, cout, k, stride, pad, false, rng)),
        Layer::BatchNorm(BatchNorm2d::new(cout)),
    ]
}

fn basic_block<F: Real>(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer<F> {
    let mut main = Vec::new();
    main.extend(conv_bn(cin, cout, 3, stride, 1, rng));
    main.push(Layer::relu());
    main.extend(conv_bn(cout, cout, 3, 1, 1, rng));
    let shortcut = (stride != 1 || cin != cout).then(|| Sequential::new(conv_bn(cin, cout, 1, stride, 0, rng).into()));
    Layer::Residual(Box::new(Residual::new(Sequential::new(main), shortcut)))
}

fn bottleneck<F: Real>(cin: usize, mid: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer<F> {
    let cout = mid * 4;
    let mut main = Vec::new();
    main.extend(conv_bn(cin, mid, 1, 1, 0, rng));
    main.push(Layer::relu());
    main.extend(conv_bn(mid, mid, 3, stride, 1, rng));
    main.push(Layer::relu());
    main.extend(conv_bn(mid, cout, 1, 1, 0, rng));
    let shortcut = (stride != 1 || cin != cout).then(|| Sequential::new(conv_bn(cin, cout, 1, stride, 0, rng).into()));
    Layer::Residual(Box::new(Residual::new(Sequential::new(main), shortcut)))
}

/// Residual network without its classification layer, ending in global
/// average pooling. Pretrained weights are loaded from `spec.weights_path`
/// and checked against `spec.weights_sha256` when set.
pub fn build_resnet<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Generator<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    layers.extend(conv_bn(spec.in_channels, 64, 7, 2, 3, &mut rng));
    layers.push(Layer::relu());
    layers.push(Layer::MaxPool(MaxPool2d::new(3, 2, 1)));
    match spec.backbone {
        Backbone::Resnet18 => {
            let mut cin = 64;
            for (stage, &cout) in [64, 128, 256, 512].iter().enumerate() {
                for i in 0..2 {
                    let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                    layers.push(basic_block(cin, cout, stride, &mut rng));
                    cin = cout;
                }
            }
        }
        Backbone::Resnet50 => {
            let mut cin = 64;
            for (stage, (&mid, &blocks)) in [64, 128, 256, 512].iter().zip(&[3, 4, 6, 3]).enumerate() {
                for i in 0..blocks {
                    let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                    layers.push(bottleneck(cin, mid, stride, &mut rng));
                    cin = mid * 4;
                }
            }
        }
        other => return Err(CirlError::config(format!("build_resnet called with {other}"))),
    }
    layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
    let mut gen = Generator {
        spec: spec.clone(),
        net: Sequential::new(layers),
    };
    if spec.pretrained {
        load_pretrained(&mut gen)?;
    }
    Ok(gen)
}

fn load_pretrained<F: Real>(gen: &mut Generator<F>) -> Result<()> {
    let path = gen
        .spec
        .weights_path
        .clone()
        .ok_or_else(|| CirlError::Load("pretrained backbone requested but no weights_path given".into()))?;
    let bytes = std::fs::read(&path).map_err(|e| CirlError::Load(format!("cannot read {}: {e}", path.display())))?;
    if let Some(expected) = &gen.spec.weights_sha256 {
        let actual = hex::encode(Sha256::digest(&bytes));
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(CirlError::Load(format!(
                "digest mismatch for {}: expected {expected}, found {actual}",
                path.display()
            )));
        }
    }
    let file = TensorFile::from_bytes(&bytes)?;
    file.load_into(|f| gen.visit_mut("", f))
}

/// Builds the generator named by `spec.backbone`.
pub fn build_generator<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Generator<F>> {
    match spec.backbone {
        Backbone::ConvnetDigits => build_convnet(spec, seed),
        Backbone::Resnet18 | Backbone::Resnet50 => build_resnet(spec, seed),
        Backbone::Linear => build_linear(spec, seed),
    }
}

/// Single affine layer `N → C`; the loss applies the softmax.
pub fn build_classifier<F: Real>(feature_dim: usize, num_classes: usize, seed: u64) -> Linear<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Linear::new(feature_dim, num_classes, &mut rng)
}

/// Generator, superior head `h1`, inferior head `h2` and masker.
#[derive(Clone, Debug)]
pub struct CirlModel<F> {
    pub generator: Generator<F>,
    pub h1: Linear<F>,
    pub h2: Linear<F>,
    pub masker: Masker<F>,
}

impl<F: Real> CirlModel<F> {
    /// Independent sub-seeds for the four parts.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let generator = build_generator(spec, seed)?;
        let n = spec.feature_dim;
        let h1 = build_classifier(n, spec.num_classes, seed.wrapping_add(1));
        let h2 = build_classifier(n, spec.num_classes, seed.wrapping_add(2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let masker = Masker::new(n, &mut rng);
        Ok(Self {
            generator,
            h1,
            h2,
            masker,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.generator.spec
    }

    /// Inference path: whole representation into `h1`.
    pub fn predict_logits(&mut self, x: Array4<F>) -> Result<Array2<F>> {
        let r = self.generator.forward(x, Mode::Eval)?;
        Ok(self.h1.apply(&r))
    }

    pub fn visit(&self, f: &mut TensorVisitor<'_, F>) {
        self.generator.visit("generator.", f);
        self.h1.visit("h1.", f);
        self.h2.visit("h2.", f);
        self.masker.visit("masker.", f);
    }

    pub fn visit_mut(&mut self, f: &mut TensorVisitorMut<'_, F>) {
        self.generator.visit_mut("generator.", f);
        self.h1.visit_mut("h1.", f);
        self.h2.visit_mut("h2.", f);
        self.masker.visit_mut("masker.", f);
    }
}

/// SHA-256 over the names and little-endian bytes of every tensor the
/// visitor yields.
pub fn tensor_digest<F: Real>(visit: impl FnOnce(&mut TensorVisitor<'_, F>)) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    visit(&mut |name, t| {
        hasher.update(name.as_bytes());
        buf.clear();
        for &v in t.iter() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    });
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn input(n: usize, size: usize) -> Array4<f32> {
        Array4::from_shape_fn((n, 3, size, size), |(a, b, c, d)| ((a + b * 3 + c * 5 + d * 7) % 10) as f32 / 10.0)
    }

    #[test]
    fn convnet_emits_feature_dim() {
        let spec = ModelSpec::new(Backbone::ConvnetDigits, 10);
        let mut g = build_convnet::<f32>(&spec, 0).unwrap();
        let r = g.forward(input(2, 32), Mode::Eval).unwrap();
        assert_eq!(r.dim(), (2, 256));
        assert!(r.iter().all(|v| v.is_finite()));
        let narrow = build_convnet::<f32>(&spec.clone().with_feature_dim(128), 0).unwrap();
        assert_eq!(narrow.clone().forward(input(1, 32), Mode::Eval).unwrap().dim(), (1, 128));
    }

    #[test]
    fn convnet_rejects_other_resolutions() {
        let spec = ModelSpec::new(Backbone::ConvnetDigits, 10);
        let mut g = build_convnet::<f32>(&spec, 0).unwrap();
        assert!(matches!(g.forward(input(1, 28), Mode::Eval), Err(CirlError::Config(_))));
        let mut bad = spec.clone();
        bad.image_size = 28;
        assert!(build_convnet::<f32>(&bad, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let spec = ModelSpec::new(Backbone::ConvnetDigits, 10).with_feature_dim(32);
        let mut g = build_convnet::<f64>(&spec, 0).unwrap();
        let mut ps = Vec::new();
        g.params_mut(&mut ps);
        for p in ps {
            if p.value.ndim() == 4 {
                p.value.fill(0.0);
            }
        }
        for mode in [Mode::Train, Mode::Eval] {
            let r = g.forward(input(3, 32).mapv(f64::from), mode).unwrap();
            assert!(r.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::new(Backbone::ConvnetDigits, 10);
        let a = CirlModel::<f32>::build(&spec, 5).unwrap();
        let b = CirlModel::<f32>::build(&spec, 5).unwrap();
        let c = CirlModel::<f32>::build(&spec, 6).unwrap();
        let d = |m: &CirlModel<f32>| tensor_digest(|f| m.visit(f));
        assert_eq!(d(&a), d(&b));
        assert_ne!(d(&a), d(&c));
    }

    #[test]
    fn classifier_matches_matmul() {
        let h = build_classifier::<f64>(6, 3, 4);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let y = h.apply(&x);
        let w = h.weight_matrix();
        for i in 0..4 {
            for c in 0..3 {
                let mut acc = h.bias.value[[c]];
                for j in 0..6 {
                    acc += x[[i, j]] * w[[c, j]];
                }
                assert!((y[[i, c]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_classifier_picks_hot_index() {
        let w = Array2::<f64>::eye(4).into_dyn();
        let h = Linear::from_parts(w, ndarray::ArrayD::zeros(ndarray::IxDyn(&[4])));
        for hot in 0..4 {
            let mut x = Array2::zeros((1, 4));
            x[[0, hot]] = 1.0;
            let y = h.apply(&x);
            let arg = y.row(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, hot);
        }
    }

    #[test]
    fn resnet18_shell_emits_512() {
        let spec = ModelSpec::new(Backbone::Resnet18, 7);
        let mut g = build_resnet::<f32>(&spec, 1).unwrap();
        let r = g.forward(input(1, 224), Mode::Eval).unwrap();
        assert_eq!(r.dim(), (1, 512));
        let again = build_resnet::<f32>(&spec, 1).unwrap();
        assert_eq!(tensor_digest(|f| g.visit("", f)), tensor_digest(|f| again.visit("", f)));
    }

    #[test]
    fn resnet50_shell_emits_2048_on_small_input() {
        let mut spec = ModelSpec::new(Backbone::Resnet50, 7);
        spec.image_size = 32;
        let mut g = build_resnet::<f32>(&spec, 1).unwrap();
        assert_eq!(g.forward(input(1, 32), Mode::Eval).unwrap().dim(), (1, 2048));
    }

    #[test]
    fn pretrained_without_weights_is_a_load_error() {
        let mut spec = ModelSpec::new(Backbone::Resnet18, 7);
        spec.pretrained = true;
        assert!(matches!(build_resnet::<f32>(&spec, 0), Err(CirlError::Load(_))));
        spec.weights_path = Some("/nonexistent/weights.bin".into());
        assert!(matches!(build_resnet::<f32>(&spec, 0), Err(CirlError::Load(_))));
    }
}
