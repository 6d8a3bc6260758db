//! Minimal layer library with explicit backward passes.
//!
//! Layers cache what they need during a training-mode forward pass and
//! accumulate parameter gradients into [`Param::grad`] on backward. Every
//! network here is a straight pipeline (residual blocks nest their own
//! pipelines), so a full autograd tape is unnecessary.

mod conv;
mod init;
mod layers;
mod linear;
pub mod loss;
mod norm;
mod optim;
mod pool;

pub use conv::Conv2d;
pub use init::{he_normal, uniform_fan_in};
pub use layers::{Flatten, Layer, Relu, Residual, Sequential};
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use optim::Sgd;
pub use pool::{GlobalAvgPool, MaxPool2d};

use ndarray::ArrayD;

use crate::real::Real;

/// Forward-pass mode. Batch-norm uses batch statistics only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Callback used to walk named tensors (parameters and buffers) for
/// checkpointing.
pub type TensorVisitor<'a, F> = dyn FnMut(String, &ArrayD<F>) + 'a;
pub type TensorVisitorMut<'a, F> = dyn FnMut(String, &mut ArrayD<F>) + 'a;
