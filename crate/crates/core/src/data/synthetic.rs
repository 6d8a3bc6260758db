use std::f32::consts::PI;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{assign_splits, DomainData, DomainDataset, ManifestEntry};
use crate::error::{CirlError, Result};

/// Glyph names, one per class.
pub const GLYPHS: [&str; 8] = ["disk", "square", "triangle", "ring", "cross", "diamond", "saltire", "frame"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    /// Background hue in degrees.
    pub background_hue: f32,
    pub stroke_color: [f32; 3],
    /// Cycles of the background stripe texture across the image; 0 is flat.
    pub texture_frequency: f32,
    /// Probability that a glyph is drawn in its class color instead of
    /// `stroke_color`. Non-zero values plant a label-correlated color cue.
    #[serde(default)]
    pub class_color_bias: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub styles: Vec<DomainStyle>,
    pub rng_seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
}

fn default_size() -> usize {
    32
}

fn default_noise() -> f32 {
    0.03
}

fn default_val() -> f64 {
    0.2
}

impl SyntheticSpec {
    /// Four domains. The first three draw most glyphs in their class color;
    /// the last one never does, so the color cue does not transfer to it.
    pub fn benchmark(num_classes: usize, images_per_class: usize, rng_seed: u64) -> Self {
        let style = |name: &str, hue: f32, stroke: [f32; 3], freq: f32, bias: f32| DomainStyle {
            name: name.to_string(),
            background_hue: hue,
            stroke_color: stroke,
            texture_frequency: freq,
            class_color_bias: bias,
        };
        Self {
            num_classes,
            images_per_class,
            image_size: 32,
            styles: vec![
                style("ember", 20.0, [0.95, 0.95, 0.9], 0.0, 0.8),
                style("frost", 200.0, [0.1, 0.1, 0.15], 3.0, 0.8),
                style("moss", 100.0, [0.95, 0.9, 0.3], 6.0, 0.8),
                style("slate", 280.0, [0.9, 0.5, 0.2], 4.0, 0.0),
            ],
            rng_seed,
            noise_std: 0.03,
            val_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images_per_class < 10 {
            return Err(CirlError::config(format!(
                "images_per_class must be at least 10, got {}",
                self.images_per_class
            )));
        }
        if self.num_classes < 2 || self.num_classes > GLYPHS.len() {
            return Err(CirlError::config(format!("num_classes must be in 2..={}", GLYPHS.len())));
        }
        if self.styles.is_empty() {
            return Err(CirlError::config("at least one domain style is required"));
        }
        if self.image_size < 8 || !(self.noise_std >= 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CirlError::config("image_size >= 8, noise_std >= 0 and val_fraction in [0, 1) required"));
        }
        for s in &self.styles {
            if !(0.0..=1.0).contains(&s.class_color_bias) {
                return Err(CirlError::config(format!("class_color_bias of `{}` must be in [0, 1]", s.name)));
            }
        }
        Ok(())
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn class_color(c: usize, num_classes: usize) -> [f32; 3] {
    hsv(360.0 * c as f32 / num_classes as f32, 0.9, 0.95)
}

/// Per-sample randomness shared by every domain: pose, color-cue draw and
/// pixel noise depend on (seed, class, index) only.
struct Draw {
    scale: f32,
    angle: f32,
    dx: f32,
    dy: f32,
    cue: f32,
    noise: Vec<f32>,
}

fn draw(spec: &SyntheticSpec, class: usize, index: usize) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    let scale = rng.random_range(0.6..0.85);
    let angle = rng.random_range(-0.35..0.35);
    let dx = rng.random_range(-0.12..0.12);
    let dy = rng.random_range(-0.12..0.12);
    let cue = rng.random::<f32>();
    let n = 3 * spec.image_size * spec.image_size;
    let noise = if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("finite std");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; n]
    };
    Draw {
        scale,
        angle,
        dx,
        dy,
        cue,
        noise,
    }
}

fn inside(glyph: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let m = u.abs().max(v.abs());
    match glyph {
        0 => r < 0.75,
        1 => m < 0.62,
        2 => v > -0.7 && v < 0.6 && u.abs() < (v + 0.7) * 0.6,
        3 => r > 0.42 && r < 0.8,
        4 => (u.abs() < 0.22 && v.abs() < 0.8) || (v.abs() < 0.22 && u.abs() < 0.8),
        5 => u.abs() + v.abs() < 0.85,
        6 => ((u - v).abs() < 0.3 || (u + v).abs() < 0.3) && m < 0.7,
        _ => m > 0.42 && m < 0.75,
    }
}

fn mask_from(spec: &SyntheticSpec, class: usize, d: &Draw) -> Array2<bool> {
    let s = spec.image_size;
    let half = s as f32 / 2.0;
    let (sin, cos) = d.angle.sin_cos();
    Array2::from_shape_fn((s, s), |(y, x)| {
        // pixel centre in [-1, 1], then into glyph coordinates
        let px = (x as f32 + 0.5 - half) / half - d.dx;
        let py = (y as f32 + 0.5 - half) / half - d.dy;
        let u = (cos * px + sin * py) / d.scale;
        let v = (-sin * px + cos * py) / d.scale;
        inside(class, u, v)
    })
}

/// Foreground mask of sample `index` of `class`; identical in every domain.
pub fn glyph_mask(spec: &SyntheticSpec, class: usize, index: usize) -> Array2<bool> {
    mask_from(spec, class, &draw(spec, class, index))
}

fn render(spec: &SyntheticSpec, style: &DomainStyle, class: usize, d: &Draw, out: &mut [f32]) {
    let s = spec.image_size;
    let mask = mask_from(spec, class, d);
    let bg = hsv(style.background_hue, 0.45, 0.75);
    let stroke = if d.cue < style.class_color_bias {
        class_color(class, spec.num_classes)
    } else {
        style.stroke_color
    };
    for y in 0..s {
        for x in 0..s {
            let t = 0.8 + 0.2 * (2.0 * PI * style.texture_frequency * (x as f32 + 0.5 * y as f32) / s as f32).sin();
            for c in 0..3 {
                let base = if mask[[y, x]] { stroke[c] } else { bg[c] * t };
                let k = c * s * s + y * s + x;
                out[k] = (base + d.noise[k]).clamp(0.0, 1.0);
            }
        }
    }
}

/// Renders `images_per_class` glyphs of every class in every domain style.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let s = spec.image_size;
    let per = 3 * s * s;
    let draws: Vec<Vec<Draw>> = (0..spec.num_classes)
        .map(|c| (0..spec.images_per_class).map(|i| draw(spec, c, i)).collect())
        .collect();
    let classes: Vec<String> = (0..spec.num_classes).map(|c| format!("{c}_{}", GLYPHS[c])).collect();
    let mut domains = Vec::new();
    let mut manifest = Vec::new();
    let mut next_id = 0u64;
    for (di, style) in spec.styles.iter().enumerate() {
        let n = spec.num_classes * spec.images_per_class;
        let mut pixels = vec![0f32; n * per];
        let mut labels = Vec::with_capacity(n);
        for c in 0..spec.num_classes {
            for i in 0..spec.images_per_class {
                let k = labels.len();
                render(spec, style, c, &draws[c][i], &mut pixels[k * per..(k + 1) * per]);
                labels.push(c);
            }
        }
        let splits = assign_splits(&labels, di, spec.val_fraction, spec.rng_seed);
        for k in 0..n {
            let mut hasher = Sha256::new();
            for v in &pixels[k * per..(k + 1) * per] {
                hasher.update(v.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                domain: style.name.clone(),
                class: classes[labels[k]].clone(),
                file: format!("{}/{}/{:06}", style.name, classes[labels[k]], next_id + k as u64),
                sha256: hex::encode(hasher.finalize()),
                split: splits[k],
            });
        }
        domains.push(DomainData {
            name: style.name.clone(),
            images: Array4::from_shape_vec((n, 3, s, s), pixels).expect("pixel count"),
            labels,
            splits,
            ids: (next_id..next_id + n as u64).collect(),
        });
        next_id += n as u64;
    }
    Ok(DomainDataset {
        classes,
        domains,
        manifest,
    })
}
