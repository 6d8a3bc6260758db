//! Adversarial training loop, model selection and target evaluation.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::checkpoint::{load_model, save_model};
use crate::data::{SourceSet, SyntheticSpec, TargetSet};
use crate::error::{CirlError, Result};
use crate::fourier::{augment_batch, InterventionConfig, SamplingStrategy};
use crate::mask::{heads_forward_backward, GumbelNoise, MaskConfig};
use crate::models::{Backbone, CirlModel, ModelSpec};
use crate::nn::{Mode, Param, Sgd};
use crate::real::Real;
use crate::representation::{
    correlation_matrix, factorization_loss_with_grad, independence_degree, RepresentationBatch, Tag,
};

/// Environment variable that requests single-threaded, bit-reproducible runs.
pub const DETERMINISTIC_ENV: &str = "CIRL_DETERMINISTIC";

/// True when `CIRL_DETERMINISTIC=1`. Every kernel here already runs on one
/// thread in a fixed order, so this only affects whether callers may fan
/// independent work out to threads.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Amplitude intervention: train on the augmented view too.
    pub use_cint: bool,
    /// Correlation factorization loss.
    pub use_cfac: bool,
    /// Adversarial mask with the inferior classifier.
    pub use_advm: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        use_cint: true,
        use_cfac: true,
        use_advm: true,
    };
    pub const ERM: Self = Self {
        use_cint: false,
        use_cfac: false,
        use_advm: false,
    };

    /// Switches one module off by name (`cint`, `cfac` or `advm`).
    pub fn without(mut self, module: &str) -> Result<Self> {
        match module {
            "cint" => self.use_cint = false,
            "cfac" => self.use_cfac = false,
            "advm" => self.use_advm = false,
            other => return Err(CirlError::config(format!("unknown module `{other}` (cint, cfac or advm)"))),
        }
        Ok(self)
    }

    pub fn label(&self) -> String {
        match (self.use_cint, self.use_cfac, self.use_advm) {
            (true, true, true) => "full".into(),
            (false, false, false) => "erm".into(),
            _ => {
                let on: Vec<&str> = [(self.use_cint, "cint"), (self.use_cfac, "cfac"), (self.use_advm, "advm")]
                    .iter()
                    .filter(|(b, _)| *b)
                    .map(|(_, n)| *n)
                    .collect();
                on.join("+")
            }
        }
    }
}

/// Flat training configuration, readable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: Backbone,
    /// Overrides the backbone's default feature width.
    pub feature_dim: Option<usize>,
    pub fac_weight: f64,
    pub kappa: f64,
    pub eta: f64,
    pub sampling_strategy: SamplingStrategy,
    pub gumbel_temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate of the masker; defaults to `lr`.
    pub masker_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the rate by `lr_decay_gamma` every this many epochs.
    pub lr_decay_every: Option<usize>,
    /// Multiply the rate by `lr_decay_gamma` once this fraction of the
    /// epochs has passed.
    pub lr_decay_at_fraction: Option<f64>,
    pub lr_decay_gamma: f64,
    pub seed: u64,
    pub use_cint: bool,
    pub use_cfac: bool,
    pub use_advm: bool,
    pub target_domain: Option<String>,
    /// Source-validation samples used to track the independence degree.
    pub probe_size: usize,
    /// Also store the full probe correlation matrix in every epoch record.
    pub log_correlation: bool,
    pub data_dir: Option<PathBuf>,
    pub image_size: usize,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::digits()
    }
}

impl TrainConfig {
    /// ConvNet profile for 32x32 digit-style data.
    pub fn digits() -> Self {
        Self {
            backbone: Backbone::ConvnetDigits,
            feature_dim: None,
            fac_weight: 2.0,
            kappa: 0.6,
            eta: 1.0,
            sampling_strategy: SamplingStrategy::Random,
            gumbel_temperature: 0.5,
            batch_size: 128,
            epochs: 50,
            lr: 0.05,
            masker_lr: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_every: Some(20),
            lr_decay_at_fraction: None,
            lr_decay_gamma: 0.1,
            seed: 0,
            use_cint: true,
            use_cfac: true,
            use_advm: true,
            target_domain: None,
            probe_size: 256,
            log_correlation: false,
            data_dir: None,
            image_size: 32,
            synthetic: None,
        }
    }

    /// Residual-network profile.
    pub fn resnet(backbone: Backbone) -> Self {
        Self {
            backbone,
            fac_weight: 5.0,
            batch_size: 16,
            lr_decay_every: None,
            lr_decay_at_fraction: Some(0.8),
            image_size: 224,
            ..Self::digits()
        }
    }

    /// Desk-scale profile for the synthetic shapes benchmark (5 classes,
    /// 100 images per class and domain, 20 epochs). Width 64 keeps the
    /// batch larger than the representation, and the factorization weight
    /// is small enough that the decorrelation term does not dominate
    /// cross-entropy while the features are still forming.
    pub fn synthetic_benchmark() -> Self {
        Self {
            feature_dim: Some(64),
            fac_weight: 0.01,
            lr: 0.01,
            epochs: 20,
            synthetic: Some(SyntheticSpec::benchmark(5, 100, 0)),
            ..Self::digits()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CirlError::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CirlError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_cint: self.use_cint,
            use_cfac: self.use_cfac,
            use_advm: self.use_advm,
        }
    }

    pub fn set_flags(&mut self, f: AblationFlags) {
        self.use_cint = f.use_cint;
        self.use_cfac = f.use_cfac;
        self.use_advm = f.use_advm;
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or_else(|| self.backbone.default_feature_dim())
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            kappa: self.kappa,
            gumbel_temperature: self.gumbel_temperature,
            rng_seed: self.seed,
        }
    }

    pub fn model_spec(&self, num_classes: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.backbone, num_classes).with_feature_dim(self.feature_dim());
        spec.image_size = self.image_size;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CirlError::config(m));
        if !(self.fac_weight > 0.0) {
            return bad(format!("fac_weight must be positive, got {}", self.fac_weight));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("masker_lr", self.masker_lr.unwrap_or(self.lr))] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        match (self.lr_decay_every, self.lr_decay_at_fraction) {
            (Some(0), _) => return bad("lr_decay_every must be positive".into()),
            (_, Some(f)) if !(f > 0.0 && f <= 1.0) => return bad(format!("lr_decay_at_fraction must be in (0, 1], got {f}")),
            (Some(_), Some(_)) => return bad("set at most one of lr_decay_every and lr_decay_at_fraction".into()),
            _ => {}
        }
        if !(self.lr_decay_gamma > 0.0) {
            return bad("lr_decay_gamma must be positive".into());
        }
        if self.probe_size < 2 {
            return bad("probe_size must be at least 2".into());
        }
        InterventionConfig {
            eta: self.eta,
            sampling_strategy: self.sampling_strategy,
            rng_seed: 0,
        }
        .validate()?;
        if self.use_advm {
            self.mask_config().k(self.feature_dim())?;
        }
        self.model_spec(2).validate()
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let decays = match (self.lr_decay_every, self.lr_decay_at_fraction) {
            (Some(every), _) => epoch / every,
            (None, Some(f)) => usize::from(epoch >= (f * self.epochs as f64).floor() as usize),
            (None, None) => 0,
        };
        base * self.lr_decay_gamma.powi(decays as i32)
    }
}

/// Losses of one training step. `total_model = l_sup + l_inf + τ·l_fac`
/// over the terms that are switched on; `total_masker = l_sup − l_inf`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_sup: f64,
    pub l_inf: f64,
    pub l_fac: f64,
    pub total_model: f64,
    pub total_masker: f64,
}

impl LossBundle {
    fn is_finite(&self) -> bool {
        [self.l_sup, self.l_inf, self.l_fac, self.total_model, self.total_masker]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// State dumped when a step produces a non-finite loss or gradient.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticSnapshot {
    pub step: u64,
    pub losses: LossBundle,
    pub grad_norm_generator: f64,
    pub grad_norm_h1: f64,
    pub grad_norm_h2: f64,
    pub grad_norm_masker: f64,
}

fn grad_norm<F: Real>(params: &[&mut Param<F>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn zero_grads<F: Real>(params: Vec<&mut Param<F>>) {
    for p in params {
        p.zero_grad();
    }
}

fn to_f64<F: Real>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Sub-steps reported to a [`Trainer::train_step_observed`] observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStep {
    BeforeMasker,
    AfterMasker,
    AfterModel,
}

/// Evaluates the model objective on stacked views and accumulates the
/// gradients of generator and heads. Rows `..n_orig` of `x` are the
/// original view, the rest (if any) the augmented one. The masker is held
/// fixed: its parameter gradients are discarded, but the gradient still
/// reaches the generator through the masker input.
///
/// `noise` must be `Some` when `flags.use_advm` is set.
pub fn model_objective<F: Real>(
    model: &mut CirlModel<F>,
    x: Array4<F>,
    labels: &[usize],
    n_orig: usize,
    noise: Option<&GumbelNoise<F>>,
    flags: AblationFlags,
    fac_weight: F,
    temperature: F,
) -> Result<LossBundle> {
    let r = model.generator.forward(x, Mode::Train)?;
    model_objective_from_features(model, r, labels, n_orig, noise, flags, fac_weight, temperature)
}

#[allow(clippy::too_many_arguments)]
fn model_objective_from_features<F: Real>(
    model: &mut CirlModel<F>,
    r: Array2<F>,
    labels: &[usize],
    n_orig: usize,
    noise: Option<&GumbelNoise<F>>,
    flags: AblationFlags,
    fac_weight: F,
    temperature: F,
) -> Result<LossBundle> {
    let rows = r.nrows();
    if labels.len() != rows || n_orig == 0 || n_orig > rows {
        return Err(CirlError::invalid(format!(
            "{rows} representation rows, {} labels, {n_orig} original rows",
            labels.len()
        )));
    }
    if let Some((i, _)) = r.rows().into_iter().enumerate().find(|(_, row)| row.iter().any(|v| !v.is_finite())) {
        return Err(CirlError::Numeric(format!("non-finite representation at batch index {i}")));
    }
    let row_weight = F::one() / F::from_usize(n_orig).expect("batch");
    let (heads, mut grad_r) = if flags.use_advm {
        let noise = noise.ok_or_else(|| CirlError::invalid("adversarial masking needs Gumbel noise"))?;
        let m = model.masker.forward(&r, noise, temperature, Mode::Train)?;
        let hg = heads_forward_backward(&r, &m.values, labels, row_weight, &mut model.h1, Some(&mut model.h2), F::one(), F::one())?;
        let through_mask = model.masker.backward(&hg.grad_m);
        let mut ps = Vec::new();
        model.masker.params_mut(&mut ps);
        zero_grads(ps);
        let g = &hg.grad_r + &through_mask;
        (hg, g)
    } else {
        let ones = Array2::from_elem(r.raw_dim(), F::one());
        let hg = heads_forward_backward(&r, &ones, labels, row_weight, &mut model.h1, None, F::one(), F::zero())?;
        let g = hg.grad_r.clone();
        (hg, g)
    };
    let mut l_fac = F::zero();
    if flags.use_cfac {
        let ro = r.slice(s![..n_orig, ..]).to_owned();
        let ra = if rows > n_orig { r.slice(s![n_orig.., ..]).to_owned() } else { ro.clone() };
        let fg = factorization_loss_with_grad(
            &RepresentationBatch::new(ro, Tag::Original)?,
            &RepresentationBatch::new(ra, Tag::Augmented)?,
        )?;
        l_fac = fg.loss;
        grad_r.slice_mut(s![..n_orig, ..]).scaled_add(fac_weight, &fg.grad_original);
        if rows > n_orig {
            grad_r.slice_mut(s![n_orig.., ..]).scaled_add(fac_weight, &fg.grad_augmented);
        } else {
            grad_r.slice_mut(s![..n_orig, ..]).scaled_add(fac_weight, &fg.grad_augmented);
        }
    }
    model.generator.backward(grad_r);
    let l_sup = to_f64(heads.l_sup);
    let l_inf = to_f64(heads.l_inf);
    let l_fac = to_f64(l_fac);
    Ok(LossBundle {
        l_sup,
        l_inf,
        l_fac,
        total_model: l_sup + l_inf + to_f64(fac_weight) * l_fac,
        total_masker: l_sup - l_inf,
    })
}

/// Accumulates masker gradients of `L_sup − L_inf` on fixed features `r`.
/// Head gradients are discarded.
pub fn masker_objective<F: Real>(
    model: &mut CirlModel<F>,
    r: &Array2<F>,
    labels: &[usize],
    n_orig: usize,
    noise: &GumbelNoise<F>,
    temperature: F,
) -> Result<(F, F)> {
    let row_weight = F::one() / F::from_usize(n_orig).expect("batch");
    let m = model.masker.forward(r, noise, temperature, Mode::Train)?;
    let hg = heads_forward_backward(r, &m.values, labels, row_weight, &mut model.h1, Some(&mut model.h2), F::one(), -F::one())?;
    model.masker.backward(&hg.grad_m);
    model.h1.weight.zero_grad();
    model.h1.bias.zero_grad();
    model.h2.weight.zero_grad();
    model.h2.bias.zero_grad();
    Ok((hg.l_sup, hg.l_inf))
}

/// Model, optimizers and step counter.
#[derive(Clone, Debug)]
pub struct Trainer<F> {
    pub model: CirlModel<F>,
    pub cfg: TrainConfig,
    model_opt: Sgd<F>,
    masker_opt: Sgd<F>,
    step: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: CirlModel<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mom = F::lit(cfg.momentum);
        let wd = F::lit(cfg.weight_decay);
        Ok(Self {
            model,
            model_opt: Sgd::new(F::lit(cfg.lr), mom, wd),
            masker_opt: Sgd::new(F::lit(cfg.masker_lr.unwrap_or(cfg.lr)), mom, wd),
            cfg,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sets both learning rates for 0-based `epoch`.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.model_opt.lr = F::lit(self.cfg.lr_at(self.cfg.lr, epoch));
        self.masker_opt.lr = F::lit(self.cfg.lr_at(self.cfg.masker_lr.unwrap_or(self.cfg.lr), epoch));
    }

    pub fn lr(&self) -> f64 {
        to_f64(self.model_opt.lr)
    }

    fn model_params(&mut self) -> Vec<&mut Param<F>> {
        let advm = self.cfg.use_advm;
        let mut ps = Vec::new();
        self.model.generator.params_mut(&mut ps);
        self.model.h1.params_mut(&mut ps);
        if advm {
            self.model.h2.params_mut(&mut ps);
        }
        ps
    }

    fn snapshot(&mut self, losses: LossBundle) -> DiagnosticSnapshot {
        let step = self.step;
        let mut g = Vec::new();
        self.model.generator.params_mut(&mut g);
        let grad_norm_generator = grad_norm(&g);
        let mut h1 = Vec::new();
        self.model.h1.params_mut(&mut h1);
        let grad_norm_h1 = grad_norm(&h1);
        let mut h2 = Vec::new();
        self.model.h2.params_mut(&mut h2);
        let grad_norm_h2 = grad_norm(&h2);
        let mut m = Vec::new();
        self.model.masker.params_mut(&mut m);
        let grad_norm_masker = grad_norm(&m);
        DiagnosticSnapshot {
            step,
            losses,
            grad_norm_generator,
            grad_norm_h1,
            grad_norm_h2,
            grad_norm_masker,
        }
    }

    fn abort(&mut self, losses: LossBundle, what: &str) -> CirlError {
        let snap = self.snapshot(losses);
        CirlError::Numeric(format!(
            "{what}; snapshot: {}",
            serde_json::to_string(&snap).expect("snapshot serializes")
        ))
    }

    pub fn train_step(&mut self, batch: &ImageBatch<F>) -> Result<LossBundle> {
        self.train_step_observed(batch, &mut |_, _| {})
    }

    /// One masker update followed by one model update on `batch`.
    /// `observe` sees the model before and after each sub-step.
    pub fn train_step_observed(
        &mut self,
        batch: &ImageBatch<F>,
        observe: &mut dyn FnMut(SubStep, &CirlModel<F>),
    ) -> Result<LossBundle> {
        if batch.len() < 2 {
            return Err(CirlError::invalid(format!("training batches need at least 2 samples, got {}", batch.len())));
        }
        let flags = self.cfg.flags();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let aug_seed = rng.next_u64();

        let n_orig = batch.len();
        let (x, labels) = if flags.use_cint {
            let aug = augment_batch(
                batch,
                &InterventionConfig {
                    eta: self.cfg.eta,
                    sampling_strategy: self.cfg.sampling_strategy,
                    rng_seed: aug_seed,
                },
            )?;
            let x = concatenate(Axis(0), &[batch.images.view(), aug.images.view()]).expect("same shapes");
            let labels = [batch.labels.as_slice(), aug.labels.as_slice()].concat();
            (x, labels)
        } else {
            (batch.images.clone(), batch.labels.clone())
        };
        let temperature = F::lit(self.cfg.gumbel_temperature);
        let fac_weight = if flags.use_cfac { F::lit(self.cfg.fac_weight) } else { F::zero() };

        for p in self.model_params() {
            p.zero_grad();
        }
        let r = self.model.generator.forward(x, Mode::Train)?;
        let n = r.ncols();
        let noise = if flags.use_advm {
            let k = self.cfg.mask_config().k(n)?;
            let first = GumbelNoise::sample(r.nrows(), k, n, &mut rng);
            let second = GumbelNoise::sample(r.nrows(), k, n, &mut rng);
            Some((first, second))
        } else {
            None
        };

        observe(SubStep::BeforeMasker, &self.model);
        if let Some((first, _)) = &noise {
            let (l_sup, l_inf) = masker_objective(&mut self.model, &r, &labels, n_orig, first, temperature)?;
            let probe = LossBundle {
                l_sup: to_f64(l_sup),
                l_inf: to_f64(l_inf),
                total_masker: to_f64(l_sup - l_inf),
                ..Default::default()
            };
            let mut ps = Vec::new();
            self.model.masker.params_mut(&mut ps);
            let norm = grad_norm(&ps);
            if !probe.is_finite() || !norm.is_finite() {
                return Err(self.abort(probe, "non-finite masker objective"));
            }
            self.masker_opt.step(&mut ps);
            zero_grads(ps);
        }
        observe(SubStep::AfterMasker, &self.model);

        // The generator parameters are unchanged by the masker update, so
        // its cached forward pass is reused for the model update.
        let losses = model_objective_from_features(
            &mut self.model,
            r,
            &labels,
            n_orig,
            noise.as_ref().map(|(_, second)| second),
            flags,
            fac_weight,
            temperature,
        )?;
        let ps = self.model_params();
        let norm = grad_norm(&ps);
        drop(ps);
        if !losses.is_finite() || !norm.is_finite() {
            return Err(self.abort(losses, "non-finite model objective"));
        }
        let mut ps = Vec::new();
        self.model.generator.params_mut(&mut ps);
        self.model.h1.params_mut(&mut ps);
        if flags.use_advm {
            self.model.h2.params_mut(&mut ps);
        }
        self.model_opt.step(&mut ps);
        zero_grads(ps);
        observe(SubStep::AfterModel, &self.model);
        self.step += 1;
        Ok(losses)
    }
}

/// Mean losses and evaluation statistics of one epoch (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub val_accuracy: f64,
    pub independence_degree: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsLog {
    pub config: TrainConfig,
    pub classes: Vec<String>,
    pub source_domains: Vec<String>,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl MetricsLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CirlError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CirlError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CirlError::Schema(format!("{}: {e}", path.display())))
    }
}

pub struct FitOutput {
    pub log: MetricsLog,
    /// Highest source-validation accuracy; ties go to the later epoch.
    pub best: CirlModel<f32>,
    pub last: CirlModel<f32>,
}

/// Top-1 accuracy of `h1(g(x))`.
pub fn accuracy(model: &mut CirlModel<f32>, data: &ImageBatch<f32>) -> Result<f64> {
    if data.is_empty() {
        return Err(CirlError::invalid("cannot evaluate on an empty set"));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let x = data.images.slice(s![start..end, .., .., ..]).to_owned();
        let logits = model.predict_logits(x)?;
        for (row, &label) in logits.rows().into_iter().zip(&data.labels[start..end]) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Features of a batch in evaluation mode.
fn features(model: &mut CirlModel<f32>, images: &Array4<f32>) -> Result<Array2<f32>> {
    let mut parts = Vec::new();
    for start in (0..images.len_of(Axis(0))).step_by(256) {
        let end = (start + 256).min(images.len_of(Axis(0)));
        parts.push(model.generator.forward(images.slice(s![start..end, .., .., ..]).to_owned(), Mode::Eval)?);
    }
    Ok(concatenate(Axis(0), &parts.iter().map(|p| p.view()).collect::<Vec<_>>()).expect("same widths"))
}

/// Fixed probe: original and augmented source-validation images.
pub struct IndependenceProbe {
    original: Array4<f32>,
    augmented: Array4<f32>,
}

impl IndependenceProbe {
    pub fn new(val: &ImageBatch<f32>, size: usize, seed: u64) -> Result<Self> {
        if val.len() < 2 {
            return Err(CirlError::config("the independence probe needs at least 2 validation samples"));
        }
        let mut idx: Vec<usize> = (0..val.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(size.min(val.len()));
        idx.sort_unstable();
        let picked = val.select(&idx);
        let aug = augment_batch(
            &picked,
            &InterventionConfig {
                eta: 1.0,
                sampling_strategy: SamplingStrategy::Random,
                rng_seed: seed,
            },
        )?;
        Ok(Self {
            original: picked.images,
            augmented: aug.images,
        })
    }

    /// Correlation between original and augmented probe features.
    pub fn correlation(&self, model: &mut CirlModel<f32>) -> Result<Array2<f64>> {
        let ro = features(model, &self.original)?.mapv(f64::from);
        let ra = features(model, &self.augmented)?.mapv(f64::from);
        let c = correlation_matrix(
            &RepresentationBatch::new(ro, Tag::Original)?,
            &RepresentationBatch::new(ra, Tag::Augmented)?,
        )?;
        Ok(c.values().clone())
    }
}

/// Trains on the source domains, selecting the epoch with the best
/// source-validation accuracy. Writes `best.ckpt`, `last.ckpt` and
/// `metrics.json` into `out_dir` when given.
pub fn fit(sources: &SourceSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutput> {
    cfg.validate()?;
    if sources.train.len() < 2 {
        return Err(CirlError::config(format!(
            "source training set holds {} samples; need at least 2",
            sources.train.len()
        )));
    }
    let size = sources.train.images.dim().2;
    let mut cfg = cfg.clone();
    cfg.image_size = size;
    let spec = cfg.model_spec(sources.classes.len());
    let model = CirlModel::<f32>::build(&spec, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let val = if sources.val.is_empty() { &sources.train } else { &sources.val };
    let probe = IndependenceProbe::new(val, cfg.probe_size, cfg.seed ^ 0x5eed)?;

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, CirlModel<f32>)> = None;
    let n = sources.train.len();
    for epoch in 0..cfg.epochs {
        trainer.set_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = LossBundle::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let l = trainer.train_step(&sources.train.select(chunk))?;
            sum.l_sup += l.l_sup;
            sum.l_inf += l.l_inf;
            sum.l_fac += l.l_fac;
            sum.total_model += l.total_model;
            sum.total_masker += l.total_masker;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let losses = LossBundle {
            l_sup: sum.l_sup / k,
            l_inf: sum.l_inf / k,
            l_fac: sum.l_fac / k,
            total_model: sum.total_model / k,
            total_masker: sum.total_masker / k,
        };
        let val_accuracy = accuracy(&mut trainer.model, val)?;
        let c = probe.correlation(&mut trainer.model)?;
        let independence = independence_degree(&crate::representation::CorrelationMatrix::new(c.clone())?);
        let record = EpochMetrics {
            epoch: epoch + 1,
            lr: trainer.lr(),
            losses,
            val_accuracy,
            independence_degree: independence,
            correlation: cfg.log_correlation.then(|| c.rows().into_iter().map(|r| r.to_vec()).collect()),
        };
        log::info!(
            "epoch {:>3} lr {:.4} sup {:.4} inf {:.4} fac {:.4} val {:.4} ind {:.3}",
            record.epoch,
            record.lr,
            losses.l_sup,
            losses.l_inf,
            losses.l_fac,
            val_accuracy,
            independence
        );
        epochs.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy >= *acc) {
            best = Some((val_accuracy, epoch + 1, trainer.model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let log = MetricsLog {
        config: cfg.clone(),
        classes: sources.classes.clone(),
        source_domains: sources.domain_names.clone(),
        epochs,
        best_epoch,
        target_domain: cfg.target_domain.clone(),
        target_accuracy: None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CirlError::io(dir, e))?;
        let meta = |epoch: usize| serde_json::json!({ "classes": sources.classes, "epoch": epoch });
        save_model(&best_model, best_epoch as u64, meta(best_epoch), &dir.join("best.ckpt"))?;
        save_model(&trainer.model, cfg.epochs as u64, meta(cfg.epochs), &dir.join("last.ckpt"))?;
        log.write(&dir.join("metrics.json"))?;
    }
    Ok(FitOutput {
        log,
        best: best_model,
        last: trainer.model,
    })
}

/// Target-domain accuracy of a model whose class list is `classes`.
pub fn evaluate(model: &mut CirlModel<f32>, classes: &[String], target: &TargetSet) -> Result<f64> {
    if model.spec().num_classes != target.classes.len() || classes != target.classes.as_slice() {
        return Err(CirlError::Schema(format!(
            "model classes {:?} do not match data classes {:?}",
            classes, target.classes
        )));
    }
    accuracy(model, &target.data)
}

/// Loads a checkpoint written by [`fit`] and evaluates it on `target`.
pub fn evaluate_checkpoint(path: &Path, target: &TargetSet) -> Result<f64> {
    let (mut model, file) = load_model::<f32>(path)?;
    let classes: Vec<String> = match file.header.metadata.get("classes") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CirlError::Load(format!("bad class list: {e}")))?,
        None => (0..model.spec().num_classes).map(|c| c.to_string()).collect(),
    };
    evaluate(&mut model, &classes, target)
}
