//! Amplitude-spectrum intervention.
//!
//! An image is split into the amplitude and phase of its 2-D DFT, the
//! amplitude is linearly interpolated towards a partner image's amplitude,
//! and the result is recombined with the original phase. Phase carries the
//! shape content; amplitude carries low-level style statistics.
//!
//! Conventions: the forward transform is unnormalized, the inverse carries
//! the `1/(H·W)` factor, spectra are never shifted, and phase is defined by
//! `F = A · exp(-j·P)`, i.e. `P = -arg F` wrapped into `(-π, π]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{CirlError, Result};
use crate::real::Real;

/// Amplitude and phase of a per-channel 2-D DFT, both `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumPair<F> {
    pub amplitude: Array3<F>,
    pub phase: Array3<F>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    /// Partner from the same domain.
    #[serde(rename = "intra")]
    IntraDomain,
    /// Partner from a different domain.
    #[serde(rename = "inter")]
    InterDomain,
    #[serde(rename = "random")]
    /// Any sample in the pool.
    #[default]
    Random,
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingStrategy::IntraDomain => "intra",
            SamplingStrategy::InterDomain => "inter",
            SamplingStrategy::Random => "random",
        })
    }
}

impl FromStr for SamplingStrategy {
    type Err = CirlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" | "intra_domain" => Ok(SamplingStrategy::IntraDomain),
            "inter" | "inter_domain" => Ok(SamplingStrategy::InterDomain),
            "random" => Ok(SamplingStrategy::Random),
            other => Err(CirlError::config(format!(
                "unknown sampling strategy `{other}` (expected intra, inter or random)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterventionConfig {
    /// Upper bound of the interpolation weight, `λ ~ U(0, eta)`.
    pub eta: f64,
    pub sampling_strategy: SamplingStrategy,
    pub rng_seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            sampling_strategy: SamplingStrategy::Random,
            rng_seed: 0,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(CirlError::config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Cached forward/inverse plans for one spatial size.
pub struct Fft2d<F: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<F>>,
    row_inv: Arc<dyn Fft<F>>,
    col_fwd: Arc<dyn Fft<F>>,
    col_inv: Arc<dyn Fft<F>>,
}

impl<F: Real> Fft2d<F> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// In-place transform of a row-major `h*w` buffer.
    fn transform(&self, buf: &mut [Complex<F>], inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut col = vec![Complex::new(F::zero(), F::zero()); self.h];
        for j in 0..self.w {
            for i in 0..self.h {
                col[i] = buf[i * self.w + j];
            }
            cols.process(&mut col);
            for i in 0..self.h {
                buf[i * self.w + j] = col[i];
            }
        }
        if inverse {
            let scale = F::one() / F::from_usize(self.h * self.w).expect("size");
            for v in buf.iter_mut() {
                *v = *v * scale;
            }
        }
    }

    pub fn decompose(&self, image: ArrayView3<'_, F>) -> Result<SpectrumPair<F>> {
        let (c, h, w) = image.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(CirlError::invalid("image must have positive extent"));
        }
        if (h, w) != (self.h, self.w) {
            return Err(CirlError::invalid(format!(
                "image is {h}x{w} but the transform was planned for {}x{}",
                self.h, self.w
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(CirlError::invalid("image contains non-finite values"));
        }
        let mut amplitude = Array3::<F>::zeros((c, h, w));
        let mut phase = Array3::<F>::zeros((c, h, w));
        let mut buf = vec![Complex::new(F::zero(), F::zero()); h * w];
        let pi = F::lit(PI);
        for ch in 0..c {
            for (dst, &v) in buf.iter_mut().zip(image.index_axis(Axis(0), ch).iter()) {
                *dst = Complex::new(v, F::zero());
            }
            self.transform(&mut buf, false);
            for (k, z) in buf.iter().enumerate() {
                let (i, j) = (k / w, k % w);
                amplitude[[ch, i, j]] = z.norm();
                let mut p = -z.arg();
                if p <= -pi {
                    p += pi + pi;
                }
                phase[[ch, i, j]] = p;
            }
        }
        Ok(SpectrumPair { amplitude, phase })
    }

    /// Inverse transform of `A·exp(-j·P)`; returns the real part and the
    /// largest absolute imaginary residue.
    pub fn recompose_with_residue(&self, spec: &SpectrumPair<F>) -> Result<(Array3<F>, F)> {
        if spec.amplitude.dim() != spec.phase.dim() {
            return Err(CirlError::invalid(format!(
                "amplitude {:?} and phase {:?} shapes differ",
                spec.amplitude.dim(),
                spec.phase.dim()
            )));
        }
        let (c, h, w) = spec.amplitude.dim();
        if (h, w) != (self.h, self.w) {
            return Err(CirlError::invalid(format!(
                "spectrum is {h}x{w} but the transform was planned for {}x{}",
                self.h, self.w
            )));
        }
        let mut out = Array3::<F>::zeros((c, h, w));
        let mut residue = F::zero();
        let mut buf = vec![Complex::new(F::zero(), F::zero()); h * w];
        for ch in 0..c {
            let amp = spec.amplitude.index_axis(Axis(0), ch);
            let ph = spec.phase.index_axis(Axis(0), ch);
            for ((dst, &a), &p) in buf.iter_mut().zip(amp.iter()).zip(ph.iter()) {
                *dst = Complex::new(a * p.cos(), -(a * p.sin()));
            }
            self.transform(&mut buf, true);
            for (dst, z) in out.index_axis_mut(Axis(0), ch).iter_mut().zip(buf.iter()) {
                *dst = z.re;
                residue = residue.max(z.im.abs());
            }
        }
        Ok((out, residue))
    }

    pub fn recompose(&self, spec: &SpectrumPair<F>) -> Result<Array3<F>> {
        self.recompose_with_residue(spec).map(|(x, _)| x)
    }
}

/// Amplitude and phase of each channel of a `[C, H, W]` image.
pub fn decompose<F: Real>(image: ArrayView3<'_, F>) -> Result<SpectrumPair<F>> {
    let (_, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(CirlError::invalid("image must have positive extent"));
    }
    Fft2d::new(h, w).decompose(image)
}

/// Single-channel convenience wrapper around [`decompose`].
pub fn decompose_plane<F: Real>(image: ArrayView2<'_, F>) -> Result<SpectrumPair<F>> {
    decompose(image.insert_axis(Axis(0)))
}

/// Real part of the inverse transform of `A·exp(-j·P)`.
pub fn recompose<F: Real>(spec: &SpectrumPair<F>) -> Result<Array3<F>> {
    let (_, h, w) = spec.amplitude.dim();
    if h == 0 || w == 0 {
        return Err(CirlError::invalid("spectrum must have positive extent"));
    }
    Fft2d::new(h, w).recompose(spec)
}

/// `(1-lam)·A(o) + lam·A(prime)`, keeping the phase of `o`.
pub fn mix_amplitude<F: Real>(o: &SpectrumPair<F>, prime: &SpectrumPair<F>, lam: F) -> Result<SpectrumPair<F>> {
    if !(lam >= F::zero() && lam <= F::one()) {
        return Err(CirlError::invalid(format!("interpolation weight {lam} outside [0, 1]")));
    }
    if o.amplitude.dim() != prime.amplitude.dim() {
        return Err(CirlError::invalid(format!(
            "spectrum shapes differ: {:?} vs {:?}",
            o.amplitude.dim(),
            prime.amplitude.dim()
        )));
    }
    let keep = F::one() - lam;
    let amplitude = Zip::from(&o.amplitude)
        .and(&prime.amplitude)
        .map_collect(|&a, &b| keep * a + lam * b);
    Ok(SpectrumPair {
        amplitude,
        phase: o.phase.clone(),
    })
}

/// Partner index for sample `i` under `strategy`, drawn from `rng`.
fn pick_partner<R: Rng>(domains: &[usize], i: usize, strategy: SamplingStrategy, rng: &mut R) -> Result<usize> {
    let eligible: Vec<usize> = match strategy {
        SamplingStrategy::Random => return Ok(rng.random_range(0..domains.len())),
        SamplingStrategy::IntraDomain => (0..domains.len()).filter(|&j| j != i && domains[j] == domains[i]).collect(),
        SamplingStrategy::InterDomain => (0..domains.len()).filter(|&j| domains[j] != domains[i]).collect(),
    };
    if eligible.is_empty() {
        return Err(CirlError::config(format!(
            "no eligible {strategy}-domain partner for a sample of domain {}",
            domains[i]
        )));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Per-sample interventions: draws `λ ~ U(0, eta)` and a partner from the
/// batch, mixes amplitudes, and clips the result to `[0, 1]`.
///
/// Sample `i` uses ChaCha stream `i` of `rng_seed`, so the output is a pure
/// function of `(batch, cfg)`.
pub fn augment_batch<F: Real>(batch: &ImageBatch<F>, cfg: &InterventionConfig) -> Result<ImageBatch<F>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CirlError::invalid("cannot augment an empty batch"));
    }
    let (n, _, h, w) = batch.images.dim();
    let fft = Fft2d::new(h, w);

    let mut plan = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(i as u64);
        let partner = pick_partner(&batch.domains, i, cfg.sampling_strategy, &mut rng)?;
        let lam = rng.random::<f64>() * cfg.eta;
        plan.push((partner, lam));
    }

    let spectra = batch
        .images
        .outer_iter()
        .map(|img| fft.decompose(img))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Array4::<F>::zeros(batch.images.raw_dim());
    for (i, &(partner, lam)) in plan.iter().enumerate() {
        let mixed = mix_amplitude(&spectra[i], &spectra[partner], F::lit(lam))?;
        let img = fft.recompose(&mixed)?;
        let lo = F::zero();
        let hi = F::one();
        out.index_axis_mut(Axis(0), i)
            .assign(&img.mapv(|v| if v < lo { lo } else if v > hi { hi } else { v }));
    }
    ImageBatch::new(out, batch.labels.clone(), batch.domains.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// O(n^2) DFT: returns (re, im) planes.
    fn naive_dft(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (h, w) = x.dim();
        let mut re = Array2::zeros((h, w));
        let mut im = Array2::zeros((h, w));
        for u in 0..h {
            for v in 0..w {
                for m in 0..h {
                    for k in 0..w {
                        let ang = -2.0 * PI * ((u * m) as f64 / h as f64 + (v * k) as f64 / w as f64);
                        re[[u, v]] += x[[m, k]] * ang.cos();
                        im[[u, v]] += x[[m, k]] * ang.sin();
                    }
                }
            }
        }
        (re, im)
    }

    /// O(n^2) inverse DFT of `A exp(-jP)`, real part.
    fn naive_idft_real(amp: &Array2<f64>, phase: &Array2<f64>) -> Array2<f64> {
        let (h, w) = amp.dim();
        let mut out = Array2::zeros((h, w));
        for m in 0..h {
            for k in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let ang = 2.0 * PI * ((u * m) as f64 / h as f64 + (v * k) as f64 / w as f64);
                        // Re[A e^{-jP} e^{j ang}] = A cos(ang - P)
                        acc += amp[[u, v]] * (ang - phase[[u, v]]).cos();
                    }
                }
                out[[m, k]] = acc / (h * w) as f64;
            }
        }
        out
    }

    fn wrap(p: f64) -> f64 {
        if p <= -PI {
            p + 2.0 * PI
        } else {
            p
        }
    }

    fn angle_close(a: f64, b: f64, tol: f64) -> bool {
        let d = (a - b).rem_euclid(2.0 * PI);
        d < tol || 2.0 * PI - d < tol
    }

    #[test]
    fn constant_image_is_dc_only() {
        let img = Array2::from_elem((4, 6), 0.25f64);
        let s = decompose_plane(img.view()).unwrap();
        assert!((s.amplitude[[0, 0, 0]] - 0.25 * 24.0).abs() < 1e-12);
        assert_eq!(s.phase[[0, 0, 0]], 0.0);
        let rest: f64 = s.amplitude.iter().skip(1).map(|v| v.abs()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn zero_image_has_zero_amplitude() {
        let s = decompose(Array3::<f64>::zeros((3, 5, 5)).view()).unwrap();
        assert!(s.amplitude.iter().all(|&a| a == 0.0));
        let back = recompose(&s).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_matches_naive_dft() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let (re, im) = naive_dft(&x);
        let s = decompose_plane(x.view()).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                let amp = re[[u, v]].hypot(im[[u, v]]);
                assert!((s.amplitude[[0, u, v]] - amp).abs() < 1e-6);
                if amp > 1e-9 {
                    let p = wrap(-im[[u, v]].atan2(re[[u, v]]));
                    assert!(angle_close(s.phase[[0, u, v]], p, 1e-6), "{u},{v}");
                }
            }
        }
        // Phase lies in (-pi, pi].
        assert!(s.phase.iter().all(|&p| p > -PI && p <= PI));
    }

    #[test]
    fn perturbed_amplitude_matches_naive_inverse() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let mut s = decompose_plane(x.view()).unwrap();
        s.amplitude[[0, 0, 0]] *= 0.5;
        s.amplitude[[0, 1, 0]] += 1.0;
        let got = recompose(&s).unwrap();
        let want = naive_idft_real(&s.amplitude.index_axis(Axis(0), 0).to_owned(), &s.phase.index_axis(Axis(0), 0).to_owned());
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_rectangular_sizes_match_naive_dft() {
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2);
        let (re, im) = naive_dft(&x);
        let s = decompose_plane(x.view()).unwrap();
        for ((u, v), &r) in re.indexed_iter() {
            assert!((s.amplitude[[0, u, v]] - r.hypot(im[[u, v]])).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = Array3::<f64>::zeros((1, 2, 2));
        x[[0, 1, 1]] = f64::NAN;
        assert!(matches!(decompose(x.view()), Err(CirlError::InvalidInput(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = SpectrumPair {
            amplitude: Array3::<f64>::zeros((1, 2, 2)),
            phase: Array3::<f64>::zeros((1, 2, 3)),
        };
        assert!(matches!(recompose(&s), Err(CirlError::InvalidInput(_))));
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let a: SpectrumPair<f64> = decompose_plane(array![[0.1, 0.9], [0.4, 0.2]].view()).unwrap();
        let b = decompose_plane(array![[0.7, 0.3], [0.5, 0.8]].view()).unwrap();
        assert_eq!(mix_amplitude(&a, &b, 0.0).unwrap().amplitude, a.amplitude);
        assert_eq!(mix_amplitude(&a, &a, 1.0).unwrap(), a);
        let mid = mix_amplitude(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.amplitude.iter().zip(a.amplitude.iter()).zip(b.amplitude.iter()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
        assert_eq!(mid.phase, a.phase);
        assert!(mix_amplitude(&a, &b, 1.5).is_err());
        assert!(mix_amplitude(&a, &b, -0.1).is_err());
        assert!(mix_amplitude(&a, &b, f64::NAN).is_err());
    }

    fn batch(n: usize, domains: Vec<usize>, seed: u64) -> ImageBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Array4::from_shape_fn((n, 3, 8, 8), |_| rand::Rng::random::<f32>(&mut rng));
        ImageBatch::new(images, vec![0; n], domains).unwrap()
    }

    #[test]
    fn eta_zero_is_identity() {
        let b = batch(4, vec![0, 0, 1, 1], 1);
        let cfg = InterventionConfig {
            eta: 0.0,
            ..Default::default()
        };
        let out = augment_batch(&b, &cfg).unwrap();
        for (x, y) in out.images.iter().zip(b.images.iter()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn single_domain_inter_strategy_fails() {
        let b = batch(3, vec![2, 2, 2], 1);
        let cfg = InterventionConfig {
            sampling_strategy: SamplingStrategy::InterDomain,
            ..Default::default()
        };
        match augment_batch(&b, &cfg) {
            Err(CirlError::Config(msg)) => assert!(msg.contains("domain 2"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_seed_is_byte_stable() {
        let b = batch(4, vec![0, 1, 0, 1], 7);
        let cfg = InterventionConfig {
            eta: 1.0,
            sampling_strategy: SamplingStrategy::InterDomain,
            rng_seed: 42,
        };
        let x = augment_batch(&b, &cfg).unwrap();
        let y = augment_batch(&b, &cfg).unwrap();
        let bits = |a: &ImageBatch<f32>| a.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
        assert!(x.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(bits(&x), bits(&b));
    }

    #[test]
    fn eta_out_of_range_is_config_error() {
        let b = batch(2, vec![0, 1], 0);
        let cfg = InterventionConfig {
            eta: 1.2,
            ..Default::default()
        };
        assert!(matches!(augment_batch(&b, &cfg), Err(CirlError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_f64(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 6 * 5)) {
            let x = Array3::from_shape_vec((2, 6, 5), vals).unwrap();
            let (back, residue) = Fft2d::new(6, 5).recompose_with_residue(&decompose(x.view()).unwrap()).unwrap();
            let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err < 1e-10);
            prop_assert!(residue < 1e-10);
        }

        #[test]
        fn phase_survives_amplitude_mixing(
            a in proptest::collection::vec(0.0f64..1.0, 8 * 8),
            b in proptest::collection::vec(0.0f64..1.0, 8 * 8),
            lam in 0.0f64..1.0,
        ) {
            let xa = Array3::from_shape_vec((1, 8, 8), a).unwrap();
            let xb = Array3::from_shape_vec((1, 8, 8), b).unwrap();
            let sa = decompose(xa.view()).unwrap();
            let sb = decompose(xb.view()).unwrap();
            let mixed = mix_amplitude(&sa, &sb, lam).unwrap();
            let (img, residue) = Fft2d::new(8, 8).recompose_with_residue(&mixed).unwrap();
            prop_assert!(residue < 1e-9);
            let again = decompose(img.view()).unwrap();
            for ((&amp, &p0), &p1) in mixed.amplitude.iter().zip(sa.phase.iter()).zip(again.phase.iter()) {
                if amp > 1e-8 {
                    prop_assert!(angle_close(p0, p1, 1e-6));
                }
            }
        }

        #[test]
        fn mixing_is_affine(lam in 0.0f64..=1.0) {
            let a = decompose_plane(array![[0.3, 0.6, 0.1], [0.9, 0.2, 0.5]].view()).unwrap();
            let b = decompose_plane(array![[0.8, 0.1, 0.4], [0.0, 0.7, 0.6]].view()).unwrap();
            let m = mix_amplitude(&a, &b, lam).unwrap();
            for ((x, y), z) in a.amplitude.iter().zip(b.amplitude.iter()).zip(m.amplitude.iter()) {
                prop_assert_eq!(*z, (1.0 - lam) * x + lam * y);
            }
        }
    }
}
