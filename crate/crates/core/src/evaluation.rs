//! Representation-importance statistics, independence curves and
//! hyper-parameter sweeps.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{leave_one_domain_out, DomainDataset};
use crate::error::{CirlError, Result};
use crate::representation::{independence_degree, CorrelationMatrix};
use crate::training::{evaluate, fit, EpochMetrics, MetricsLog, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Min-max normalized per-dimension importance, in `[0, 1]`.
    pub importance: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Per-dimension importance of a `C x N` classifier weight matrix: mean
/// absolute weight over classes, min-max normalized across dimensions.
/// `std` is the population standard deviation of the normalized vector.
pub fn importance_stats(weights: &Array2<f64>) -> Result<ImportanceReport> {
    if weights.is_empty() {
        return Err(CirlError::invalid("empty weight matrix"));
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(CirlError::Numeric("non-finite classifier weight".into()));
    }
    let raw: Array1<f64> = weights.mapv(f64::abs).mean_axis(ndarray::Axis(0)).expect("non-empty");
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return Err(CirlError::Numeric(
            "all dimensions carry the same importance; min-max normalization is undefined".into(),
        ));
    }
    let importance: Vec<f64> = raw.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    let std = (importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ImportanceReport { importance, mean, std })
}

/// `(epoch, independence degree)` per logged epoch. Uses the logged
/// correlation matrix when present, the logged scalar otherwise.
pub fn independence_curve(epochs: &[EpochMetrics]) -> Result<Vec<(usize, f64)>> {
    if epochs.len() < 2 {
        return Err(CirlError::invalid(format!(
            "an independence curve needs at least 2 epochs, got {}",
            epochs.len()
        )));
    }
    epochs
        .iter()
        .map(|e| {
            let v = match &e.correlation {
                Some(rows) => {
                    let n = rows.len();
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    let c = Array2::from_shape_vec((n, flat.len() / n.max(1)), flat)
                        .map_err(|_| CirlError::Schema(format!("ragged correlation matrix at epoch {}", e.epoch)))?;
                    independence_degree(&CorrelationMatrix::new(c)?)
                }
                None => e.independence_degree,
            };
            Ok((e.epoch, v))
        })
        .collect()
}

/// Reads `metrics.json` from a run directory.
pub fn independence_curve_from_dir(dir: &Path) -> Result<Vec<(usize, f64)>> {
    independence_curve(&MetricsLog::read(&dir.join("metrics.json"))?.epochs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Factorization weight.
    FacWeight,
    Kappa,
    FeatureDim,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::FacWeight => "fac_weight",
            SweepParam::Kappa => "kappa",
            SweepParam::FeatureDim => "feature_dim",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::FacWeight => cfg.fac_weight = value,
            SweepParam::Kappa => cfg.kappa = value,
            SweepParam::FeatureDim => cfg.feature_dim = Some(value as usize),
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = CirlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fac_weight" | "tau" => Ok(SweepParam::FacWeight),
            "kappa" => Ok(SweepParam::Kappa),
            "feature_dim" | "n" => Ok(SweepParam::FeatureDim),
            other => Err(CirlError::config(format!("cannot sweep `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub target_domain: String,
    pub seed: u64,
    /// `None` when the cell failed; see `error`.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str = "param,value,target_domain,seed,accuracy";

/// Fixed-column CSV; failed cells leave `accuracy` empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.param, r.value, r.target_domain, r.seed, acc).expect("string write");
    }
    out
}

/// Runs fit + evaluate for every (value, target, seed) cell. A failing cell
/// is logged and recorded with its error; the sweep carries on.
pub fn sensitivity_sweep(
    ds: &DomainDataset,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    targets: &[String],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || targets.is_empty() || seeds.is_empty() {
        return Err(CirlError::config("sweep needs at least one value, target and seed"));
    }
    let mut rows = Vec::new();
    for &value in values {
        for target in targets {
            for &seed in seeds {
                let mut cfg = base.clone();
                param.apply(&mut cfg, value);
                cfg.seed = seed;
                cfg.target_domain = Some(target.clone());
                let result = cfg.validate().and_then(|_| {
                    let (src, tgt) = leave_one_domain_out(ds, target)?;
                    let mut out = fit(&src, &cfg, None)?;
                    evaluate(&mut out.best, &src.classes, &tgt)
                });
                if let Err(e) = &result {
                    log::warn!("sweep cell {}={value} target={target} seed={seed} failed: {e}", param.name());
                }
                rows.push(SweepRow {
                    param: param.name().to_string(),
                    value,
                    target_domain: target.clone(),
                    seed,
                    accuracy: result.as_ref().ok().copied(),
                    error: result.err().map(|e| e.to_string()),
                });
            }
        }
    }
    Ok(rows)
}
