use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;

use super::{uniform_fan_in, Mode, Param, TensorVisitor, TensorVisitorMut};
use crate::real::Real;

/// Affine map `y = x W^T + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Array2<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = uniform_fan_in(&[outputs, inputs], inputs, rng);
        let bias = uniform_fan_in(&[outputs], inputs, rng);
        Self::from_parts(weight, bias)
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self::from_parts(ArrayD::zeros(IxDyn(&[outputs, inputs])), ArrayD::zeros(IxDyn(&[outputs])))
    }

    pub fn from_parts(weight: ArrayD<F>, bias: ArrayD<F>) -> Self {
        assert_eq!(weight.ndim(), 2, "linear weight must be 2-d");
        assert_eq!(bias.len(), weight.shape()[0], "linear bias length");
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    /// Forward without touching the cache.
    pub fn apply(&self, x: &Array2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.inputs(), "linear input width");
        let mut y = x.dot(&self.weight_matrix().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &b;
        y
    }

    pub fn forward(&mut self, x: Array2<F>, mode: Mode) -> Array2<F> {
        let y = self.apply(&x);
        self.cache = (mode == Mode::Train).then_some(x);
        y
    }

    pub fn backward(&mut self, grad: Array2<F>, need_input_grad: bool) -> Option<Array2<F>> {
        let x = self.cache.take().expect("linear backward without a training forward");
        let gw = grad.t().dot(&x);
        let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
        wg += &gw;
        let gb = grad.sum_axis(Axis(0));
        let mut bg = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        bg += &gb;
        need_input_grad.then(|| grad.dot(&self.weight_matrix()))
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        f(format!("{prefix}weight"), &self.weight.value);
        f(format!("{prefix}bias"), &self.bias.value);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        f(format!("{prefix}weight"), &mut self.weight.value);
        f(format!("{prefix}bias"), &mut self.bias.value);
    }
}
