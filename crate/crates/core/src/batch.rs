use ndarray::{Array4, Axis};

use crate::error::{CirlError, Result};
use crate::real::Real;

/// A batch of NCHW images with per-sample class and domain labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<F> {
    pub images: Array4<F>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl<F: Real> ImageBatch<F> {
    pub fn new(images: Array4<F>, labels: Vec<usize>, domains: Vec<usize>) -> Result<Self> {
        let n = images.len_of(Axis(0));
        if labels.len() != n || domains.len() != n {
            return Err(CirlError::invalid(format!(
                "batch of {n} images with {} labels and {} domain tags",
                labels.len(),
                domains.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch made of the given sample positions, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
        }
    }
}
