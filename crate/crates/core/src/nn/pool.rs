use ndarray::{Array2, Array4};

use super::Mode;
use crate::real::Real;

/// Max pooling with square window, stride and zero-free padding (padded taps
/// never win).
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    pub fn forward<F: Real>(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
        let dims = x.dim();
        let (n, c, h, w) = dims;
        let (ho, wo) = self
            .output_size(h, w)
            .unwrap_or_else(|| panic!("pool window {} larger than input {h}x{w}", self.kernel));
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<F>::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let os = out.as_slice_mut().expect("fresh");
        let pad = self.padding as isize;
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_idx = base;
                    for ki in 0..self.kernel {
                        let ih = (i * self.stride + ki) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let iw = (j * self.stride + kj) as isize - pad;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (nc * ho + i) * wo + j;
                    os[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some((argmax, dims));
        out
    }

    pub fn backward<F: Real>(&mut self, grad: Array4<F>) -> Array4<F> {
        let (argmax, dims) = self.cache.take().expect("pool backward without a training forward");
        let grad = if grad.is_standard_layout() { grad } else { grad.as_standard_layout().into_owned() };
        let mut gx = Array4::<F>::zeros(dims);
        let gxs = gx.as_slice_mut().expect("fresh");
        for (g, &idx) in grad.iter().zip(argmax.iter()) {
            gxs[idx] += *g;
        }
        gx
    }
}

/// Spatial mean over each channel: `[n, c, h, w] -> [n, c]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    cache: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward<F: Real>(&mut self, x: Array4<F>, mode: Mode) -> Array2<F> {
        let dims = x.dim();
        let (n, c, h, w) = dims;
        let inv = F::one() / F::from_usize(h * w).expect("plane");
        let out = Array2::from_shape_fn((n, c), |(b, ch)| {
            x.slice(ndarray::s![b, ch, .., ..]).iter().copied().sum::<F>() * inv
        });
        self.cache = (mode == Mode::Train).then_some(dims);
        out
    }

    pub fn backward<F: Real>(&mut self, grad: Array2<F>) -> Array4<F> {
        let dims = self.cache.take().expect("pool backward without a training forward");
        let (_, _, h, w) = dims;
        let inv = F::one() / F::from_usize(h * w).expect("plane");
        Array4::from_shape_fn(dims, |(b, ch, _, _)| grad[[b, ch]] * inv)
    }
}
