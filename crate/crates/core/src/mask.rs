//! Superior/inferior dimension masking.
//!
//! A masker MLP scores every representation dimension; a k-hot relaxation
//! (element-wise max over `k` Gumbel-perturbed softmax draws) turns the
//! scores into a soft mask `m`. Dimensions with `m ≈ 1` feed the superior
//! classifier, the complement `1 − m` feeds the inferior one.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CirlError, Result};
use crate::nn::loss::cross_entropy_weighted;
use crate::nn::{Layer, Linear, Mode, Param, Sequential, TensorVisitor, TensorVisitorMut};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    /// Fraction of dimensions treated as superior.
    pub kappa: f64,
    pub gumbel_temperature: f64,
    pub rng_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            kappa: 0.6,
            gumbel_temperature: 0.5,
            rng_seed: 0,
        }
    }
}

impl MaskConfig {
    /// Number of superior dimensions `k = ⌊κN⌋`, validated to `1..=N-1`.
    pub fn k(&self, n: usize) -> Result<usize> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(CirlError::config(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(CirlError::config(format!(
                "gumbel temperature must be positive, got {}",
                self.gumbel_temperature
            )));
        }
        let k = (self.kappa * n as f64).floor() as usize;
        if k < 1 || k + 1 > n {
            return Err(CirlError::config(format!(
                "kappa {} with {n} dimensions gives k = {k}; need 1 <= k <= {}",
                self.kappa,
                n.saturating_sub(1)
            )));
        }
        Ok(k)
    }
}

/// Per-sample soft masks, `B x N`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector<F> {
    pub values: Array2<F>,
}

impl<F: Real> MaskVector<F> {
    pub fn ones(batch: usize, n: usize) -> Self {
        Self {
            values: Array2::from_elem((batch, n), F::one()),
        }
    }

    /// Count of entries above one half in each row.
    pub fn active_counts(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&v| v > F::lit(0.5)).count())
            .collect()
    }
}

/// Gumbel noise `ξ = −log(−log u)`, laid out `[batch, k, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise<F> {
    pub xi: Array3<F>,
}

impl<F: Real> GumbelNoise<F> {
    pub fn sample<R: Rng + ?Sized>(batch: usize, k: usize, n: usize, rng: &mut R) -> Self {
        let xi = Array3::from_shape_fn((batch, k, n), |_| {
            // u in (0, 1): both logs stay finite.
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            F::lit(-(-u.ln()).ln())
        });
        Self { xi }
    }

    pub fn draws(&self) -> usize {
        self.xi.len_of(Axis(1))
    }
}

/// k-hot relaxation with what backward needs.
#[derive(Clone, Debug)]
pub struct KHotSample<F> {
    pub mask: MaskVector<F>,
    /// Softmax of every draw, `[batch, k, N]`.
    draws: Array3<F>,
    /// For each `(row, j)`, the draw achieving the maximum.
    winner: Array2<usize>,
    temperature: F,
}

/// `m_j = max_l softmax((log z + ξ^l) / t)_j`, row by row.
pub fn khot_from_log_probs<F: Real>(log_z: &Array2<F>, noise: &GumbelNoise<F>, temperature: F) -> Result<KHotSample<F>> {
    let (b, n) = log_z.dim();
    let (nb, k, nn) = noise.xi.dim();
    if nb != b || nn != n {
        return Err(CirlError::invalid(format!(
            "noise shaped {:?} does not match scores {:?}",
            noise.xi.dim(),
            log_z.dim()
        )));
    }
    if !(temperature > F::zero()) {
        return Err(CirlError::invalid("temperature must be positive"));
    }
    let mut draws = Array3::<F>::zeros((b, k, n));
    let mut mask = Array2::<F>::zeros((b, n));
    let mut winner = Array2::<usize>::zeros((b, n));
    for row in 0..b {
        for l in 0..k {
            let mut logits: Vec<F> = (0..n)
                .map(|j| (log_z[[row, j]] + noise.xi[[row, l, j]]) / temperature)
                .collect();
            let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in logits.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for (j, v) in logits.into_iter().enumerate() {
                let s = v / sum;
                draws[[row, l, j]] = s;
                if l == 0 || s > mask[[row, j]] {
                    mask[[row, j]] = s;
                    winner[[row, j]] = l;
                }
            }
        }
    }
    Ok(KHotSample {
        mask: MaskVector { values: mask },
        draws,
        winner,
        temperature,
    })
}

impl<F: Real> KHotSample<F> {
    /// Gradient with respect to `log z` given the gradient on the mask.
    pub fn backward(&self, grad_mask: &Array2<F>) -> Array2<F> {
        let (b, k, n) = self.draws.dim();
        let mut grad = Array2::<F>::zeros((b, n));
        for row in 0..b {
            for l in 0..k {
                // Gradient reaching draw l: only the coordinates it won.
                let mut dot = F::zero();
                for j in 0..n {
                    if self.winner[[row, j]] == l {
                        dot += grad_mask[[row, j]] * self.draws[[row, l, j]];
                    }
                }
                for i in 0..n {
                    let gi = if self.winner[[row, i]] == l { grad_mask[[row, i]] } else { F::zero() };
                    let s = self.draws[[row, l, i]];
                    grad[[row, i]] += s * (gi - dot) / self.temperature;
                }
            }
        }
        grad
    }
}

/// Samples an approximately k-hot mask from probability vector `z`.
pub fn gumbel_khot<F: Real, R: Rng + ?Sized>(z: ArrayView1<'_, F>, k: usize, temperature: F, rng: &mut R) -> Result<Array1<F>> {
    let n = z.len();
    if z.iter().any(|&v| !(v >= F::zero())) {
        return Err(CirlError::invalid("probability vector has negative or NaN entries"));
    }
    let total: F = z.iter().copied().sum();
    if (total - F::one()).abs() > F::lit(1e-5) {
        return Err(CirlError::invalid(format!("probability vector sums to {total}, not 1")));
    }
    if k < 1 || k + 1 > n {
        return Err(CirlError::invalid(format!("k = {k} outside 1..={}", n.saturating_sub(1))));
    }
    let log_z = z.mapv(|v| v.ln()).insert_axis(Axis(0));
    let noise = GumbelNoise::sample(1, k, n, rng);
    let sample = khot_from_log_probs(&log_z, &noise, temperature)?;
    Ok(sample.mask.values.row(0).to_owned())
}

fn log_softmax_rows<F: Real>(o: &Array2<F>) -> Array2<F> {
    let mut out = o.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Three-layer MLP scoring each dimension, followed by a softmax.
#[derive(Clone, Debug)]
pub struct Masker<F> {
    pub net: Sequential<F>,
    cache: Option<MaskerCache<F>>,
}

#[derive(Clone, Debug)]
struct MaskerCache<F> {
    log_z: Array2<F>,
    sample: KHotSample<F>,
}

impl<F: Real> Masker<F> {
    /// Hidden width equals the feature dimension.
    pub fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let net = Sequential::new(vec![
            Layer::Linear(Linear::new(n, n, rng)),
            Layer::relu(),
            Layer::Linear(Linear::new(n, n, rng)),
            Layer::relu(),
            Layer::Linear(Linear::new(n, n, rng)),
        ]);
        Self { net, cache: None }
    }

    pub fn dim(&self) -> usize {
        match &self.net.layers[0] {
            Layer::Linear(l) => l.inputs(),
            _ => unreachable!("masker starts with a linear layer"),
        }
    }

    /// Per-row probability vectors `z = softmax(ŵ(r))`.
    pub fn probabilities(&self, r: &Array2<F>) -> Array2<F> {
        let mut net = self.net.clone();
        let o = net.forward(r.clone().into_dyn(), Mode::Eval);
        let o = o.into_dimensionality::<ndarray::Ix2>().expect("2-d scores");
        log_softmax_rows(&o).mapv(|v| v.exp())
    }

    /// Masks for `r` under the given noise. Caches for [`Masker::backward`]
    /// in training mode.
    pub fn forward(&mut self, r: &Array2<F>, noise: &GumbelNoise<F>, temperature: F, mode: Mode) -> Result<MaskVector<F>> {
        let o = self.net.forward(r.clone().into_dyn(), mode);
        let o = o.into_dimensionality::<ndarray::Ix2>().expect("2-d scores");
        if let Some((row, _)) = o.rows().into_iter().enumerate().find(|(_, row)| row.iter().any(|v| !v.is_finite())) {
            return Err(CirlError::Numeric(format!("non-finite masker activation at batch index {row}")));
        }
        let log_z = log_softmax_rows(&o);
        let sample = khot_from_log_probs(&log_z, noise, temperature)?;
        let mask = sample.mask.clone();
        self.cache = (mode == Mode::Train).then_some(MaskerCache { log_z, sample });
        Ok(mask)
    }

    /// Accumulates masker gradients from `∂L/∂m`; returns `∂L/∂r` through
    /// the masker input.
    pub fn backward(&mut self, grad_mask: &Array2<F>) -> Array2<F> {
        let cache = self.cache.take().expect("masker backward without a training forward");
        let g_logz = cache.sample.backward(grad_mask);
        // log z = log_softmax(o): do = g - softmax(o) * sum(g)
        let mut g_o = g_logz.clone();
        for (mut row, lz) in g_o.axis_iter_mut(Axis(0)).zip(cache.log_z.axis_iter(Axis(0))) {
            let total: F = row.iter().copied().sum();
            for (g, &l) in row.iter_mut().zip(lz.iter()) {
                *g -= l.exp() * total;
            }
        }
        self.net
            .backward(g_o.into_dyn(), true)
            .expect("input grad requested")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d")
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.net.params_mut(out);
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_, F>) {
        self.net.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_, F>) {
        self.net.visit_mut(prefix, f);
    }
}

/// Masks for a representation batch with noise drawn from `cfg.rng_seed`.
pub fn masker_forward<F: Real>(r: &Array2<F>, masker: &Masker<F>, cfg: &MaskConfig) -> Result<MaskVector<F>> {
    let (b, n) = r.dim();
    if n != masker.dim() {
        return Err(CirlError::invalid(format!(
            "representation width {n} does not match masker width {}",
            masker.dim()
        )));
    }
    let k = cfg.k(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let noise = GumbelNoise::sample(b, k, n, &mut rng);
    masker
        .clone()
        .forward(r, &noise, F::lit(cfg.gumbel_temperature), Mode::Eval)
}

fn check_views<F: Real>(r: &Array2<F>, m: &Array2<F>, labels: &[usize]) -> Result<()> {
    if r.dim() != m.dim() {
        return Err(CirlError::invalid(format!(
            "representation {:?} and mask {:?} shapes differ",
            r.dim(),
            m.dim()
        )));
    }
    if r.nrows() != labels.len() {
        return Err(CirlError::invalid(format!("{} rows but {} labels", r.nrows(), labels.len())));
    }
    Ok(())
}

/// Superior and inferior classification losses over the original and
/// augmented views: each is the sum of the two per-view mean
/// cross-entropies.
pub fn split_losses<F: Real>(
    r_o: &Array2<F>,
    r_a: &Array2<F>,
    m_o: &MaskVector<F>,
    m_a: &MaskVector<F>,
    labels: &[usize],
    h1: &Linear<F>,
    h2: &Linear<F>,
) -> Result<(F, F)> {
    check_views(r_o, &m_o.values, labels)?;
    check_views(r_a, &m_a.values, labels)?;
    let w = F::one() / F::from_usize(labels.len()).expect("batch");
    let mut sup = F::zero();
    let mut inf = F::zero();
    for (r, m) in [(r_o, &m_o.values), (r_a, &m_a.values)] {
        let superior = r * m;
        let inferior = r * &m.mapv(|v| F::one() - v);
        sup += cross_entropy_weighted(&h1.apply(&superior), labels, w)?.0;
        inf += cross_entropy_weighted(&h2.apply(&inferior), labels, w)?.0;
    }
    Ok((sup, inf))
}

/// Forward/backward of the two masked heads on row-stacked views.
#[derive(Clone, Debug)]
pub struct HeadsGrad<F> {
    pub l_sup: F,
    pub l_inf: F,
    pub grad_r: Array2<F>,
    pub grad_m: Array2<F>,
}

/// Evaluates `c_sup·L_sup + c_inf·L_inf` on stacked views, accumulating
/// head gradients into `h1`/`h2` and returning gradients for `r` and `m`.
///
/// `h2` may be `None`, in which case only the superior branch is used.
#[allow(clippy::too_many_arguments)]
pub fn heads_forward_backward<F: Real>(
    r: &Array2<F>,
    m: &Array2<F>,
    labels: &[usize],
    row_weight: F,
    h1: &mut Linear<F>,
    h2: Option<&mut Linear<F>>,
    c_sup: F,
    c_inf: F,
) -> Result<HeadsGrad<F>> {
    check_views(r, m, labels)?;
    let superior = r * m;
    let logits1 = h1.forward(superior, Mode::Train);
    let (l_sup, g1) = cross_entropy_weighted(&logits1, labels, row_weight)?;
    let g_in1 = h1.backward(g1 * c_sup, true).expect("input grad");
    let mut grad_r = &g_in1 * m;
    let mut grad_m = &g_in1 * r;
    let mut l_inf = F::zero();
    if let Some(h2) = h2 {
        let comp = m.mapv(|v| F::one() - v);
        let inferior = r * &comp;
        let logits2 = h2.forward(inferior, Mode::Train);
        let (l, g2) = cross_entropy_weighted(&logits2, labels, row_weight)?;
        l_inf = l;
        let g_in2 = h2.backward(g2 * c_inf, true).expect("input grad");
        grad_r += &(&g_in2 * &comp);
        grad_m -= &(&g_in2 * r);
    }
    Ok(HeadsGrad {
        l_sup,
        l_inf,
        grad_r,
        grad_m,
    })
}
