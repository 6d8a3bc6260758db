use ndarray::ArrayD;

use super::Param;
use crate::real::Real;

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v = m v + (g + wd w)`, `w -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub lr: F,
    pub momentum: F,
    pub weight_decay: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(lr: F, momentum: F, weight_decay: F) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "optimizer parameter group changed");
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, v| {
                    let d = g + wd * *w;
                    *v = mom * *v + d;
                    *w -= lr * *v;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn momentum_accumulates() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 1.0f64));
        p.grad.fill(0.5);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0]] - 0.95).abs() < 1e-12);
        opt.step(&mut [&mut p]);
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((p.value[[0]] - (0.95 - 0.095)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_weights() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 2.0f64));
        let mut opt = Sgd::new(0.1, 0.0, 0.5);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0]] - 1.9).abs() < 1e-12);
    }
}
