use ndarray::{Array2, Array4, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;

use super::{he_normal, Mode, Param, TensorVisitor, TensorVisitorMut};
use crate::real::Real;

/// Number of im2col columns gathered per matrix product.
const COLS_PER_GEMM: usize = 4096;

/// 2-D convolution over NCHW tensors, lowered to im2col + matrix products.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Array4<F>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let bias = bias.then(|| Param::new(ndarray::ArrayD::zeros(IxDyn(&[out_channels]))));
        Self {
            weight: Param::new(weight),
            bias,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Spatial output size for an input of size `(h, w)`, or `None` when the
    /// kernel does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let s = self.weight.value.shape();
        let (kh, kw) = (s[2], s[3]);
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }

    fn geometry(&self, x: &Array4<F>) -> Geometry {
        let (_, c, h, w) = x.dim();
        let s = self.weight.value.shape();
        let (ho, wo) = self
            .output_size(h, w)
            .unwrap_or_else(|| panic!("conv kernel {}x{} larger than padded input {h}x{w}", s[2], s[3]));
        assert_eq!(c, s[1], "conv input channels");
        Geometry {
            c,
            h,
            w,
            kh: s[2],
            kw: s[3],
            ho,
            wo,
            stride: self.stride,
            pad: self.padding,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let s = self.weight.value.shape();
        let rows = s[0];
        let cols = s[1] * s[2] * s[3];
        self.weight
            .value
            .view()
            .into_shape_with_order((rows, cols))
            .expect("contiguous conv weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d view")
    }

    pub fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
        let g = self.geometry(&x);
        let n = x.dim().0;
        let co = self.out_channels();
        let hw = g.hw_out();
        let mut out = Array4::<F>::zeros((n, co, g.ho, g.wo));
        let chunk = (COLS_PER_GEMM / hw).clamp(1, n.max(1));
        let xs = x.as_slice().expect("standard layout");
        let wmat = self.weight_matrix();
        {
            let out_s = out.as_slice_mut().expect("fresh array");
            let mut start = 0;
            while start < n {
                let nb = chunk.min(n - start);
                let cols = im2col(xs, start, nb, &g);
                let res = wmat.dot(&cols);
                for b in 0..nb {
                    for o in 0..co {
                        let src = &res.row(o).to_slice().expect("row-major")[b * hw..(b + 1) * hw];
                        let dst = &mut out_s[((start + b) * co + o) * hw..((start + b) * co + o + 1) * hw];
                        dst.copy_from_slice(src);
                    }
                }
                start += nb;
            }
        }
        if let Some(bias) = &self.bias {
            for (o, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
                let b = bias.value[[o]];
                plane.mapv_inplace(|v| v + b);
            }
        }
        self.cache = (mode == Mode::Train).then_some(x);
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, grad: Array4<F>, need_input_grad: bool) -> Option<Array4<F>> {
        let x = self.cache.take().expect("conv backward without a training forward");
        let g = self.geometry(&x);
        let n = x.dim().0;
        let co = self.out_channels();
        let hw = g.hw_out();
        let grad = if grad.is_standard_layout() { grad } else { grad.as_standard_layout().into_owned() };
        let gs = grad.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let chunk = (COLS_PER_GEMM / hw).clamp(1, n.max(1));

        let mut grad_w = Array2::<F>::zeros((co, g.rows()));
        let mut grad_x = need_input_grad.then(|| Array4::<F>::zeros(x.raw_dim()));
        let wmat = self.weight_matrix().to_owned();
        let mut start = 0;
        while start < n {
            let nb = chunk.min(n - start);
            let mut gmat = Array2::<F>::zeros((co, nb * hw));
            for b in 0..nb {
                for o in 0..co {
                    let src = &gs[((start + b) * co + o) * hw..((start + b) * co + o + 1) * hw];
                    gmat.row_mut(o)
                        .as_slice_mut()
                        .expect("row-major")[b * hw..(b + 1) * hw]
                        .copy_from_slice(src);
                }
            }
            let cols = im2col(xs, start, nb, &g);
            ndarray::linalg::general_mat_mul(F::one(), &gmat, &cols.t(), F::one(), &mut grad_w);
            if let Some(gx) = grad_x.as_mut() {
                let gcols = wmat.t().dot(&gmat);
                col2im(&gcols, gx.as_slice_mut().expect("fresh array"), start, nb, &g);
            }
            start += nb;
        }

        let gw_view = grad_w
            .into_shape_with_order(self.weight.value.raw_dim())
            .expect("weight shape");
        self.weight.grad += &gw_view;
        if let Some(bias) = self.bias.as_mut() {
            for o in 0..co {
                let mut acc = F::zero();
                for b in 0..n {
                    acc += gs[(b * co + o) * hw..(b * co + o + 1) * hw].iter().copied().sum::<F>();
                }
                bias.grad[[o]] += acc;
            }
        }
        grad_x
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        f(format!("{prefix}weight"), &self.weight.value);
        if let Some(b) = &self.bias {
            f(format!("{prefix}bias"), &b.value);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        f(format!("{prefix}weight"), &mut self.weight.value);
        if let Some(b) = self.bias.as_mut() {
            f(format!("{prefix}bias"), &mut b.value);
        }
    }
}

/// Gathers receptive fields of samples `start..start+nb` into a
/// `[c*kh*kw, nb*ho*wo]` matrix. Out-of-bounds taps are zero.
fn im2col<F: Real>(xs: &[F], start: usize, nb: usize, g: &Geometry) -> Array2<F> {
    let hw = g.hw_out();
    let plane = g.h * g.w;
    let mut cols = Array2::<F>::zeros((g.rows(), nb * hw));
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("row-major");
                for b in 0..nb {
                    let img = &xs[((start + b) * g.c + ci) * plane..((start + b) * g.c + ci + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &img[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let dst = &mut row[b * hw + oh * g.wo..b * hw + (oh + 1) * g.wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column-gradient matrix back onto the input gradient.
fn col2im<F: Real>(gcols: &Array2<F>, gx: &mut [F], start: usize, nb: usize, g: &Geometry) {
    let hw = g.hw_out();
    let plane = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = gcols.row(r);
                let row = row.to_slice().expect("row-major");
                for b in 0..nb {
                    let img = &mut gx[((start + b) * g.c + ci) * plane..((start + b) * g.c + ci + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut img[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let src = &row[b * hw + oh * g.wo..b * hw + (oh + 1) * g.wo];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Array4<f64>, w: &ndarray::ArrayD<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let s = w.shape();
        let (co, kh, kw) = (s[0], s[2], s[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array4::zeros((n, co, ho, wo));
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x[[b, ci, ih as usize, iw as usize]] * w[[o, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[b, o, i, j]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 3)] {
            let mut conv = Conv2d::<f64>::new(3, 4, 3, stride, pad, false, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 7, 6), |(a, b, c, d)| ((a * 31 + b * 7 + c * 3 + d) % 11) as f64 / 11.0 - 0.4);
            let got = conv.forward(x.clone(), Mode::Eval);
            let want = conv_naive(&x, &conv.weight.value, stride, pad);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |(a, b, c, d)| ((a * 13 + b * 5 + c * 7 + d * 3) % 17) as f64 / 17.0 - 0.5);
        // Loss = sum(out * probe) for a fixed probe tensor.
        let out = conv.forward(x.clone(), Mode::Train);
        let probe = Array4::from_shape_fn(out.dim(), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0);
        let gx = conv.backward(probe.clone(), true).unwrap();
        let loss = |conv: &mut Conv2d<f64>, x: &Array4<f64>| (conv.forward(x.clone(), Mode::Eval) * &probe).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "input grad {idx:?}: {fd} vs {}", gx[idx]);
        }
        let analytic = conv.weight.grad.clone();
        for idx in [[0, 0, 0, 0], [2, 1, 1, 2]] {
            let orig = conv.weight.value[&idx[..]];
            conv.weight.value[&idx[..]] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.value[&idx[..]] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.value[&idx[..]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - analytic[&idx[..]]).abs() < 1e-6);
        }
        let bias_fd = probe.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
        for o in 0..3 {
            assert!((bias_fd[o] - conv.bias.as_ref().unwrap().grad[[o]]).abs() < 1e-9);
        }
    }
}
