use ndarray::{Array1, Array4, ArrayD, IxDyn};

use super::{Mode, Param, TensorVisitor, TensorVisitorMut};
use crate::real::Real;

/// Per-channel batch normalization for NCHW tensors.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased estimate into the running statistics, like the usual reference
/// implementations.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub momentum: F,
    pub eps: F,
    cache: Option<BnCache<F>>,
}

#[derive(Clone, Debug)]
struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), F::one())),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), F::one()),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let plane = h * w;
        let count = n * plane;
        let xs = x.as_slice().expect("standard layout");

        let (mean, inv_std) = if mode == Mode::Train {
            let mut mean = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            let cnt = F::from_usize(count).expect("count");
            for ch in 0..c {
                let mut s = F::zero();
                for b in 0..n {
                    s += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<F>();
                }
                let m = s / cnt;
                let mut v = F::zero();
                for b in 0..n {
                    for &e in &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        v += (e - m) * (e - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / cnt;
            }
            let mom = self.momentum;
            let unbias = if count > 1 {
                cnt / (cnt - F::one())
            } else {
                F::one()
            };
            for ch in 0..c {
                self.running_mean[[ch]] = (F::one() - mom) * self.running_mean[[ch]] + mom * mean[ch];
                self.running_var[[ch]] = (F::one() - mom) * self.running_var[[ch]] + mom * var[ch] * unbias;
            }
            let inv = var.mapv(|v| F::one() / (v + self.eps).sqrt());
            (mean, inv)
        } else {
            let mean = Array1::from_iter(self.running_mean.iter().copied());
            let inv = Array1::from_iter(self.running_var.iter().map(|&v| F::one() / (v + self.eps).sqrt()));
            (mean, inv)
        };

        let mut xhat = Array4::<F>::zeros((n, c, h, w));
        let mut out = Array4::<F>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh");
            let os = out.as_slice_mut().expect("fresh");
            for b in 0..n {
                for ch in 0..c {
                    let (g, be, m, is) = (self.gamma.value[[ch]], self.beta.value[[ch]], mean[ch], inv_std[ch]);
                    let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    for i in range {
                        let v = (xs[i] - m) * is;
                        xh[i] = v;
                        os[i] = g * v + be;
                    }
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(BnCache { xhat, inv_std });
        out
    }

    pub fn backward(&mut self, grad: Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("batch-norm backward without a training forward");
        let grad = if grad.is_standard_layout() { grad } else { grad.as_standard_layout().into_owned() };
        let (n, c, h, w) = grad.dim();
        let plane = h * w;
        let cnt = F::from_usize(n * plane).expect("count");
        let gs = grad.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().expect("fresh");
        for ch in 0..c {
            let mut dgamma = F::zero();
            let mut dbeta = F::zero();
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dgamma += gs[i] * xh[i];
                    dbeta += gs[i];
                }
            }
            self.gamma.grad[[ch]] += dgamma;
            self.beta.grad[[ch]] += dbeta;
            let gamma = self.gamma.value[[ch]];
            let is = cache.inv_std[ch];
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    gxs[i] = gamma * is / cnt * (cnt * gs[i] - dbeta - xh[i] * dgamma);
                }
            }
        }
        gx
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        f(format!("{prefix}weight"), &self.gamma.value);
        f(format!("{prefix}bias"), &self.beta.value);
        f(format!("{prefix}running_mean"), &self.running_mean);
        f(format!("{prefix}running_var"), &self.running_var);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        f(format!("{prefix}weight"), &mut self.gamma.value);
        f(format!("{prefix}bias"), &mut self.beta.value);
        f(format!("{prefix}running_mean"), &mut self.running_mean);
        f(format!("{prefix}running_var"), &mut self.running_var);
    }
}
