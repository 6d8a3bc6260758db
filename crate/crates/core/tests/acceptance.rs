//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed. Tolerances and time limits
//! are fixed constants below.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cirl_core::data::{generate_synthetic, leave_one_domain_out, SyntheticSpec};
use cirl_core::fourier::{augment_batch, decompose, mix_amplitude, recompose, InterventionConfig, SamplingStrategy};
use cirl_core::mask::{gumbel_khot, GumbelNoise};
use cirl_core::nn::Param;
use cirl_core::representation::{
    correlation_matrix, factorization_loss, factorization_loss_with_grad, RepresentationBatch, Tag,
};
use cirl_core::training::{evaluate, fit, model_objective, AblationFlags, MetricsLog, TrainConfig, Trainer};
use cirl_core::{Backbone, CirlModel, ImageBatch, ModelSpec};

const ROUND_TRIP_TOL: f32 = 1e-4;
const IDENTITY_TOL: f32 = 1e-4;
const PEARSON_TOL: f64 = 1e-6;
const FAC_LOSS_TOL: f64 = 1e-10;
const GRAD_REL_TOL: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, GRAD_FLOOR)`.
const GRAD_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const ERM_TOL: f64 = 1e-6;
const MIN_ERM_MARGIN: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(start: Instant, limit_s: u64, mut o: Outcome) -> Outcome {
    let took = start.elapsed();
    if took > Duration::from_secs(limit_s) {
        o.pass = false;
        o.detail.push_str(&format!("; took {:.1}s, limit {limit_s}s", took.as_secs_f64()));
    } else {
        o.detail.push_str(&format!("; {:.2}s", took.as_secs_f64()));
    }
    o
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>())
}

fn fourier_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f32;
    for _ in 0..100 {
        let x = random_image(&mut rng, 3, 32, 32);
        let back = recompose(&decompose(x.view()).unwrap()).unwrap();
        worst = worst.max((&back - &x).iter().fold(0f32, |m, v| m.max(v.abs())));
    }
    within(t, 5, outcome(worst < ROUND_TRIP_TOL, format!("max |x' - x| = {worst:.2e} over 100 images")))
}

fn max_abs_diff(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
    (a - b).iter().fold(0f32, |m, v| m.max(v.abs()))
}

fn augmentation_identity() -> Outcome {
    let t = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 64,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let images = (2usize..7, 0u64..1000, any::<u64>()).prop_map(|(n, img_seed, aug_seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(img_seed);
        let x = Array4::from_shape_fn((n, 3, 16, 16), |_| rng.random::<f32>());
        (x, aug_seed)
    });
    let result = runner.run(&images, |(x, seed)| {
        let n = x.dim().0;
        let batch = ImageBatch::new(x.clone(), vec![0; n], (0..n).map(|i| i % 2).collect()).unwrap();
        for strategy in [SamplingStrategy::Random, SamplingStrategy::InterDomain] {
            let cfg = InterventionConfig {
                eta: 0.0,
                sampling_strategy: strategy,
                rng_seed: seed,
            };
            let out = augment_batch(&batch, &cfg).unwrap();
            prop_assert!(max_abs_diff(&out.images, &x) < IDENTITY_TOL);
        }
        for img in x.outer_iter() {
            let s = decompose(img).unwrap();
            let back = recompose(&mix_amplitude(&s, &s, 1.0).unwrap()).unwrap();
            let err = (&back - &img).iter().fold(0f32, |m, v| m.max(v.abs()));
            prop_assert!(err < IDENTITY_TOL, "self-partner error {err}");
        }
        Ok(())
    });
    let o = match result {
        Ok(()) => outcome(true, "eta=0 and lambda=1 self-partner hold on 64 generated batches".into()),
        Err(e) => outcome(false, format!("{e}")),
    };
    within(t, 5, o)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

fn correlation_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_c, mut worst_l) = (0f64, 0f64);
    for _ in 0..200 {
        let ro = Array2::from_shape_fn((8, 4), |_| rng.random_range(-2.0..2.0));
        let ra = Array2::from_shape_fn((8, 4), |_| rng.random_range(-2.0..2.0));
        let c = correlation_matrix(
            &RepresentationBatch::new(ro.clone(), Tag::Original).unwrap(),
            &RepresentationBatch::new(ra.clone(), Tag::Augmented).unwrap(),
        )
        .unwrap();
        let mut loss = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let a: Vec<f64> = ro.column(i).to_vec();
                let b: Vec<f64> = ra.column(j).to_vec();
                let p = pearson(&a, &b);
                worst_c = worst_c.max((c.values()[[i, j]] - p).abs());
                let target = if i == j { 1.0 } else { 0.0 };
                loss += 0.5 * (c.values()[[i, j]] - target).powi(2);
            }
        }
        worst_l = worst_l.max((factorization_loss(&c) - loss).abs());
    }
    within(
        t,
        5,
        outcome(
            worst_c < PEARSON_TOL && worst_l < FAC_LOSS_TOL,
            format!("max |C - pearson| = {worst_c:.2e}, max loss error = {worst_l:.2e} over 200 pairs"),
        ),
    )
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// 16 inputs, 6 features, 3 classes.
fn toy_spec() -> ModelSpec {
    let mut spec = ModelSpec::new(Backbone::Linear, 3).with_feature_dim(6);
    spec.in_channels = 1;
    spec.image_size = 4;
    spec
}

/// Every trainable tensor of generator and both heads, in a fixed order.
fn trainable(model: &mut CirlModel<f64>) -> Vec<&mut Param<f64>> {
    let mut ps = Vec::new();
    model.generator.params_mut(&mut ps);
    model.h1.params_mut(&mut ps);
    model.h2.params_mut(&mut ps);
    ps
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_fac = 0f64;
    let mut worst_obj = 0f64;
    let mut checked = 0usize;
    for trial in 0..50u64 {
        // Factorization loss on raw features.
        let ro = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let ra = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let loss_of = |o: &Array2<f64>, a: &Array2<f64>| {
            factorization_loss_with_grad(
                &RepresentationBatch::new(o.clone(), Tag::Original).unwrap(),
                &RepresentationBatch::new(a.clone(), Tag::Augmented).unwrap(),
            )
            .unwrap()
        };
        let g = loss_of(&ro, &ra);
        for idx in ndarray::indices((8, 5)) {
            for (which, analytic) in [(0, g.grad_original[idx]), (1, g.grad_augmented[idx])] {
                let (mut p, mut m) = ((ro.clone(), ra.clone()), (ro.clone(), ra.clone()));
                if which == 0 {
                    p.0[idx] += FD_STEP;
                    m.0[idx] -= FD_STEP;
                } else {
                    p.1[idx] += FD_STEP;
                    m.1[idx] -= FD_STEP;
                }
                let numeric = (loss_of(&p.0, &p.1).loss - loss_of(&m.0, &m.1).loss) / (2.0 * FD_STEP);
                worst_fac = worst_fac.max(rel_err(analytic, numeric));
            }
        }

        // Full model objective on a linear generator with two linear heads.
        let spec = toy_spec();
        let base = CirlModel::<f64>::build(&spec, 100 + trial).unwrap();
        let b = 5;
        let x = Array4::from_shape_fn((2 * b, 1, 4, 4), |_| rng.random::<f64>());
        let labels: Vec<usize> = (0..2 * b).map(|i| i % 3).collect();
        let noise = GumbelNoise::<f64>::sample(2 * b, 4, 6, &mut rng);
        let objective = |m: &mut CirlModel<f64>| {
            model_objective(m, x.clone(), &labels, b, Some(&noise), AblationFlags::FULL, 0.7, 0.5)
                .unwrap()
                .total_model
        };
        let mut analytic_model = base.clone();
        for p in trainable(&mut analytic_model) {
            p.zero_grad();
        }
        objective(&mut analytic_model);
        let grads: Vec<_> = trainable(&mut analytic_model).iter().map(|p| p.grad.clone()).collect();
        for (ti, g) in grads.iter().enumerate() {
            for flat in 0..g.len() {
                let analytic = g.as_slice().unwrap()[flat];
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    trainable(&mut m)[ti].value.as_slice_mut().unwrap()[flat] += delta;
                    objective(&mut m)
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                worst_obj = worst_obj.max(rel_err(analytic, numeric));
                checked += 1;
            }
        }
    }
    within(
        t,
        60,
        outcome(
            worst_fac < GRAD_REL_TOL && worst_obj < GRAD_REL_TOL,
            format!(
                "max rel err: factorization {worst_fac:.2e}, model objective {worst_obj:.2e} ({checked} coordinates, 50 trials)"
            ),
        ),
    )
}

fn mask_cardinality() -> Outcome {
    let t = Instant::now();
    let (n, k) = (10, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut card_ok, mut top_ok) = (0, 0);
    let draws = 1000;
    for _ in 0..draws {
        // Peaked: six favoured dimensions at random positions share
        // almost all of the mass.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let favoured = &order[..k];
        let mut z = ndarray::Array1::<f64>::from_elem(n, 2.5e-4);
        for &i in favoured {
            z[i] = (1.0 - 2.5e-4 * (n - k) as f64) / k as f64;
        }
        let m = gumbel_khot(z.view(), k, 0.05, &mut rng).unwrap();
        if m.iter().filter(|&&v| v > 0.5).count() <= k {
            card_ok += 1;
        }
        let mut by_mask: Vec<usize> = (0..n).collect();
        by_mask.sort_by(|&a, &b| m[b].total_cmp(&m[a]));
        if by_mask[..k].iter().all(|i| favoured.contains(i)) {
            top_ok += 1;
        }
    }
    let rate = top_ok as f64 / draws as f64;
    within(
        t,
        10,
        outcome(
            card_ok == draws && rate >= 0.95,
            format!("cardinality ok in {card_ok}/{draws}, top-{k} recovered in {:.1}%", rate * 100.0),
        ),
    )
}

/// Plain softmax cross-entropy trainer for `x -> W1 x + b1 -> W2 r + b2`,
/// SGD with momentum and coupled weight decay.
struct PlainCe {
    params: Vec<Vec<f64>>,
    velocity: Vec<Vec<f64>>,
    dims: (usize, usize, usize),
    lr: f64,
    momentum: f64,
    decay: f64,
}

impl PlainCe {
    fn step(&mut self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let (d, h, c) = self.dims;
        let (w1, b1, w2, b2) = (&self.params[0], &self.params[1], &self.params[2], &self.params[3]);
        let mut grads = vec![vec![0.0; d * h], vec![0.0; h], vec![0.0; h * c], vec![0.0; c]];
        let bsz = x.len() as f64;
        let mut loss = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let r: Vec<f64> = (0..h).map(|j| b1[j] + (0..d).map(|k| w1[j * d + k] * xi[k]).sum::<f64>()).collect();
            let o: Vec<f64> = (0..c).map(|j| b2[j] + (0..h).map(|k| w2[j * h + k] * r[k]).sum::<f64>()).collect();
            let mx = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = o.iter().map(|v| (v - mx).exp()).sum();
            loss += -(o[yi] - mx - z.ln());
            let dout: Vec<f64> = (0..c)
                .map(|j| ((o[j] - mx).exp() / z - if j == yi { 1.0 } else { 0.0 }) / bsz)
                .collect();
            let mut dr = vec![0.0; h];
            for j in 0..c {
                grads[3][j] += dout[j];
                for k in 0..h {
                    grads[2][j * h + k] += dout[j] * r[k];
                    dr[k] += dout[j] * w2[j * h + k];
                }
            }
            for j in 0..h {
                grads[1][j] += dr[j];
                for k in 0..d {
                    grads[0][j * d + k] += dr[j] * xi[k];
                }
            }
        }
        for ((p, v), g) in self.params.iter_mut().zip(&mut self.velocity).zip(&grads) {
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i] + self.decay * p[i];
                p[i] -= self.lr * v[i];
            }
        }
        loss / bsz
    }
}

fn erm_reduction() -> Outcome {
    let t = Instant::now();
    let spec = toy_spec();
    let model = CirlModel::<f64>::build(&spec, 6).unwrap();
    let mut cfg = TrainConfig {
        backbone: Backbone::Linear,
        feature_dim: Some(6),
        image_size: 4,
        lr: 0.1,
        seed: 6,
        ..TrainConfig::digits()
    };
    cfg.set_flags(AblationFlags::ERM);
    let flat = |p: &Param<f64>| p.value.iter().copied().collect::<Vec<f64>>();
    let params = vec![
        generator_tensor(&model, "weight"),
        generator_tensor(&model, "bias"),
        flat(&model.h1.weight),
        flat(&model.h1.bias),
    ];
    let mut plain = PlainCe {
        velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        params,
        dims: (16, 6, 3),
        lr: cfg.lr,
        momentum: cfg.momentum,
        decay: cfg.weight_decay,
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut worst = 0f64;
    for _ in 0..50 {
        let x = Array4::from_shape_fn((8, 1, 4, 4), |_| rng.random::<f64>());
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let batch = ImageBatch::new(x.clone(), y.clone(), vec![0; 8]).unwrap();
        let got = trainer.train_step(&batch).unwrap();
        let rows: Vec<Vec<f64>> = x.outer_iter().map(|s| s.iter().copied().collect()).collect();
        let want = plain.step(&rows, &y);
        worst = worst.max((got.l_sup - want).abs()).max((got.total_model - want).abs());
    }
    within(t, 60, outcome(worst < ERM_TOL, format!("max per-step loss gap {worst:.2e} over 50 steps")))
}

/// Generator tensor of the linear toy whose name ends in `suffix`.
fn generator_tensor(model: &CirlModel<f64>, suffix: &str) -> Vec<f64> {
    let mut found = None;
    model.generator.visit("g", &mut |name: String, t: &ndarray::ArrayD<f64>| {
        if name.ends_with(suffix) {
            found = Some(t.iter().copied().collect());
        }
    });
    found.expect("linear generator tensor")
}

struct Run {
    variant: String,
    seed: u64,
    accuracy: f64,
    log: MetricsLog,
}

fn variants() -> Vec<AblationFlags> {
    let full = AblationFlags::FULL;
    vec![
        full,
        AblationFlags::ERM,
        full.without("cint").unwrap(),
        full.without("cfac").unwrap(),
        full.without("advm").unwrap(),
    ]
}

fn runs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("benchmark-runs")
}

fn benchmark_runs() -> (Vec<Run>, Duration) {
    let t = Instant::now();
    let base = TrainConfig::synthetic_benchmark();
    let ds = generate_synthetic(base.synthetic.as_ref().unwrap()).unwrap();
    let target = "slate";
    let (src, tgt) = leave_one_domain_out(&ds, target).unwrap();
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        for flags in variants() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.target_domain = Some(target.into());
            cfg.set_flags(flags);
            let dir = runs_dir().join(format!("{}-seed{seed}", flags.label()));
            let mut out = fit(&src, &cfg, Some(&dir)).unwrap();
            let accuracy = evaluate(&mut out.best, &src.classes, &tgt).unwrap();
            out.log.target_accuracy = Some(accuracy);
            out.log.write(&dir.join("metrics.json")).unwrap();
            eprintln!(
                "  benchmark {:<10} seed {seed}: target accuracy {accuracy:.3} ({:.0}s elapsed)",
                flags.label(),
                t.elapsed().as_secs_f64()
            );
            runs.push(Run {
                variant: flags.label(),
                seed,
                accuracy,
                log: out.log,
            });
        }
    }
    (runs, t.elapsed())
}

fn mean_of(runs: &[Run], variant: &str, f: impl Fn(&Run) -> f64) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional_check(runs: &[Run], took: Duration) -> Outcome {
    let labels: Vec<String> = variants().iter().map(|f| f.label()).collect();
    let means: Vec<(String, f64)> = labels.iter().map(|l| (l.clone(), mean_of(runs, l, |r| r.accuracy))).collect();
    let full = means[0].1;
    let erm = means[1].1;
    let beats_ablations = means[2..].iter().all(|(_, m)| full > *m);
    let fast = took <= Duration::from_secs(30 * 60);
    let table: Vec<String> = means.iter().map(|(l, m)| format!("{l} {m:.3}")).collect();
    outcome(
        full - erm >= MIN_ERM_MARGIN && beats_ablations && fast,
        format!(
            "mean target accuracy over 3 seeds: {}; full - erm = {:+.1} points; {} runs in {:.0}s",
            table.join(", "),
            (full - erm) * 100.0,
            runs.len(),
            took.as_secs_f64()
        ),
    )
}

fn independence_trend(runs: &[Run]) -> Outcome {
    let first_last = |r: &Run| {
        (
            r.log.epochs.first().unwrap().independence_degree,
            r.log.epochs.last().unwrap().independence_degree,
        )
    };
    let full: Vec<&Run> = runs.iter().filter(|r| r.variant == "full").collect();
    let decreasing = full.iter().filter(|r| first_last(r).1 < first_last(r).0).count();
    let full_final = mean_of(runs, "full", |r| first_last(r).1);
    let erm_final = mean_of(runs, "erm", |r| first_last(r).1);
    let per_seed: Vec<String> = full
        .iter()
        .map(|r| {
            let (a, b) = first_last(r);
            format!("seed {} {a:.1}->{b:.1}", r.seed)
        })
        .collect();
    outcome(
        decreasing == full.len() && full_final < erm_final,
        format!(
            "full: {}; mean final full {full_final:.1} vs erm {erm_final:.1}",
            per_seed.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let t = Instant::now();
    std::env::set_var(cirl_core::training::DETERMINISTIC_ENV, "1");
    let mut spec = SyntheticSpec::benchmark(3, 12, 9);
    spec.styles.truncate(3);
    let ds = generate_synthetic(&spec).unwrap();
    let (src, tgt) = leave_one_domain_out(&ds, "moss").unwrap();
    let cfg = TrainConfig {
        feature_dim: Some(16),
        batch_size: 16,
        epochs: 2,
        probe_size: 16,
        log_correlation: true,
        seed: 11,
        ..TrainConfig::digits()
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for rep in 0..2 {
        let dir = tmp.path().join(format!("rep{rep}"));
        let mut out = fit(&src, &cfg, Some(&dir)).unwrap();
        out.log.target_accuracy = Some(evaluate(&mut out.best, &src.classes, &tgt).unwrap());
        out.log.write(&dir.join("metrics.json")).unwrap();
        let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
        files.push((read("metrics.json"), read("best.ckpt"), read("last.ckpt")));
    }
    let same = files[0] == files[1];
    within(
        t,
        120,
        outcome(same, format!("metrics.json and checkpoints byte-identical across repeats: {same}")),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, o: Outcome| {
        if !o.pass {
            failed += 1;
        }
        println!("criterion {id} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report("1", "fourier round trip", fourier_round_trip());
    report("2", "augmentation identity", augmentation_identity());
    report("3", "correlation oracle", correlation_oracle());
    report("4", "gradient fidelity", gradient_fidelity());
    report("5", "mask cardinality", mask_cardinality());
    report("6", "erm reduction", erm_reduction());
    report("10", "determinism", determinism());
    let (runs, took) = benchmark_runs();
    report("7", "directional generalization", directional_check(&runs, took));
    report("8", "independence trend", independence_trend(&runs));
    println!("criterion 9 full-data reproduction: SKIPPED (needs a user-supplied Digits-DG copy; not part of CI)");
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
