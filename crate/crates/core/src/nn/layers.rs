use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4, IxDyn};

use super::{BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Mode, Param, TensorVisitor, TensorVisitorMut};
use crate::real::Real;

#[derive(Clone, Debug, Default)]
pub struct Relu<F> {
    out: Option<ArrayD<F>>,
}

impl<F: Real> Relu<F> {
    pub fn forward(&mut self, x: ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let y = x.mapv_into(|v| if v > F::zero() { v } else { F::zero() });
        self.out = (mode == Mode::Train).then(|| y.clone());
        y
    }

    pub fn backward(&mut self, mut grad: ArrayD<F>) -> ArrayD<F> {
        let out = self.out.take().expect("relu backward without a training forward");
        ndarray::Zip::from(&mut grad).and(&out).for_each(|g, &o| {
            if o <= F::zero() {
                *g = F::zero();
            }
        });
        grad
    }
}

/// `[n, ...] -> [n, prod(...)]`
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn forward<F: Real>(&mut self, x: ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let shape = x.shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
        let y = x.into_shape_with_order(IxDyn(&[n, rest])).expect("contiguous");
        self.shape = (mode == Mode::Train).then_some(shape);
        y
    }

    pub fn backward<F: Real>(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let shape = self.shape.take().expect("flatten backward without a training forward");
        let grad = if grad.is_standard_layout() { grad } else { grad.as_standard_layout().into_owned() };
        grad.into_shape_with_order(IxDyn(&shape)).expect("contiguous")
    }
}

/// `relu(main(x) + shortcut(x))`, with an identity shortcut when none is set.
#[derive(Clone, Debug)]
pub struct Residual<F> {
    pub main: Sequential<F>,
    pub shortcut: Option<Sequential<F>>,
    relu: Relu<F>,
}

impl<F: Real> Residual<F> {
    pub fn new(main: Sequential<F>, shortcut: Option<Sequential<F>>) -> Self {
        Self {
            main,
            shortcut,
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let skip = match self.shortcut.as_mut() {
            Some(s) => s.forward(x.clone(), mode),
            None => x.clone(),
        };
        let mut y = self.main.forward(x, mode);
        y += &skip;
        self.relu.forward(y, mode)
    }

    fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        let g = self.relu.backward(grad);
        let mut gx = self.main.backward(g.clone(), true).expect("input grad requested");
        let gs = match self.shortcut.as_mut() {
            Some(s) => s.backward(g, true).expect("input grad requested"),
            None => g,
        };
        gx += &gs;
        gx
    }
}

#[derive(Clone, Debug)]
pub enum Layer<F> {
    Conv(Conv2d<F>),
    BatchNorm(BatchNorm2d<F>),
    Relu(Relu<F>),
    MaxPool(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
    Linear(Linear<F>),
    Residual(Box<Residual<F>>),
}

fn to4<F: Real>(x: ArrayD<F>) -> Array4<F> {
    x.into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

fn to2<F: Real>(x: ArrayD<F>) -> Array2<F> {
    x.into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

impl<F: Real> Layer<F> {
    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    pub fn forward(&mut self, x: ArrayD<F>, mode: Mode) -> ArrayD<F> {
        match self {
            Layer::Conv(l) => l.forward(to4(x), mode).into_dyn(),
            Layer::BatchNorm(l) => l.forward(to4(x), mode).into_dyn(),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::MaxPool(l) => l.forward(to4(x), mode).into_dyn(),
            Layer::GlobalAvgPool(l) => l.forward(to4(x), mode).into_dyn(),
            Layer::Flatten(l) => l.forward(x, mode),
            Layer::Linear(l) => l.forward(to2(x), mode).into_dyn(),
            Layer::Residual(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: ArrayD<F>, need_input_grad: bool) -> Option<ArrayD<F>> {
        match self {
            Layer::Conv(l) => l.backward(to4(grad), need_input_grad).map(|g| g.into_dyn()),
            Layer::BatchNorm(l) => Some(l.backward(to4(grad)).into_dyn()),
            Layer::Relu(l) => Some(l.backward(grad)),
            Layer::MaxPool(l) => Some(l.backward(to4(grad)).into_dyn()),
            Layer::GlobalAvgPool(l) => Some(l.backward(to2(grad)).into_dyn()),
            Layer::Flatten(l) => Some(l.backward(grad)),
            Layer::Linear(l) => l.backward(to2(grad), need_input_grad).map(|g| g.into_dyn()),
            Layer::Residual(l) => Some(l.backward(grad)),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        match self {
            Layer::Conv(l) => l.params_mut(out),
            Layer::BatchNorm(l) => l.params_mut(out),
            Layer::Linear(l) => l.params_mut(out),
            Layer::Residual(l) => {
                l.main.params_mut(out);
                if let Some(s) = l.shortcut.as_mut() {
                    s.params_mut(out);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) | Layer::Flatten(_) => {}
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        match self {
            Layer::Conv(l) => l.visit(prefix, f),
            Layer::BatchNorm(l) => l.visit(prefix, f),
            Layer::Linear(l) => l.visit(prefix, f),
            Layer::Residual(l) => {
                l.main.visit(&format!("{prefix}main."), f);
                if let Some(s) = &l.shortcut {
                    s.visit(&format!("{prefix}shortcut."), f);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) | Layer::Flatten(_) => {}
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        match self {
            Layer::Conv(l) => l.visit_mut(prefix, f),
            Layer::BatchNorm(l) => l.visit_mut(prefix, f),
            Layer::Linear(l) => l.visit_mut(prefix, f),
            Layer::Residual(l) => {
                l.main.visit_mut(&format!("{prefix}main."), f);
                if let Some(s) = l.shortcut.as_mut() {
                    s.visit_mut(&format!("{prefix}shortcut."), f);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) | Layer::Flatten(_) => {}
        }
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> Sequential<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, mut x: ArrayD<F>, mode: Mode) -> ArrayD<F> {
        for layer in &mut self.layers {
            x = layer.forward(x, mode);
        }
        x
    }

    /// Backpropagates through every layer. The input gradient of the first
    /// layer is only computed when `need_input_grad` is set.
    pub fn backward(&mut self, mut grad: ArrayD<F>, need_input_grad: bool) -> Option<ArrayD<F>> {
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            match layer.backward(grad, i > 0 || need_input_grad) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        for layer in &mut self.layers {
            layer.params_mut(out);
        }
    }

    pub fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        for p in ps {
            p.zero_grad();
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}{i}."), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}{i}."), f);
        }
    }
}
