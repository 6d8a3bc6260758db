//! Softmax and cross-entropy on row-major logit matrices.

use ndarray::{Array2, Axis};

use crate::error::{CirlError, Result};
use crate::real::Real;

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Per-row cross-entropy `-log softmax(logits)[label]`.
pub fn cross_entropy_rows<F: Real>(logits: &Array2<F>, labels: &[usize]) -> Result<Vec<F>> {
    check_labels(logits, labels)?;
    Ok(logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            lse - row[y]
        })
        .collect())
}

/// `sum_i weight * CE_i` and its gradient with respect to the logits.
///
/// With `weight = 1/B` this is the batch-mean cross-entropy.
pub fn cross_entropy_weighted<F: Real>(logits: &Array2<F>, labels: &[usize], weight: F) -> Result<(F, Array2<F>)> {
    let rows = cross_entropy_rows(logits, labels)?;
    let loss = rows.into_iter().sum::<F>() * weight;
    let mut grad = softmax_rows(logits);
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= F::one();
        row.mapv_inplace(|v| v * weight);
    }
    Ok((loss, grad))
}

/// Batch-mean cross-entropy and its logit gradient.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    if labels.is_empty() {
        return Err(CirlError::invalid("cross-entropy of an empty batch"));
    }
    let w = F::one() / F::from_usize(labels.len()).expect("batch size");
    cross_entropy_weighted(logits, labels, w)
}

fn check_labels<F: Real>(logits: &Array2<F>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(CirlError::invalid(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let classes = logits.ncols();
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(CirlError::invalid(format!(
            "label {y} at row {i} outside class range 0..{classes}"
        )));
    }
    Ok(())
}
