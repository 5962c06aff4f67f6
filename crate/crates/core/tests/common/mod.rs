//! Checks shared by the acceptance target and the focused integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::time::{Duration, Instant};

use mlx_core::data::{build_decoy_mnist, gen_toy2d, load_idx, Batch, DatasetSplits, DecoySizes};
use mlx_core::ibp::{input_box, propagate, propagate_affine, BoxInterval};
use mlx_core::metrics::{
    boundary_grid, evaluate, macro_avg_accuracy, rcs_from_accuracies, worst_group_accuracy, EvalOptions, MetricsReport,
};
use mlx_core::model::{task_loss, MlpSpec, ModelParams};
use mlx_core::perturb::{pgd_attack, PerturbConfig};
use mlx_core::rng::{stream, Stream};
use mlx_core::theory::{prop1_population_oracle, prop1_weights, verify, TheoryConfig, VerificationReport};
use mlx_core::train::{importance_scores, total_loss, total_loss_grad, train, Method, Selection, TrainingConfig};
use mlx_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub fn timed(budget: Duration, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (ok, detail) = f();
    let elapsed = t.elapsed();
    let in_budget = elapsed <= budget;
    Outcome {
        pass: ok && in_budget,
        detail: if in_budget {
            detail
        } else {
            format!("{detail}; over budget ({elapsed:.1?} > {budget:?})")
        },
        elapsed,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random MLP with every weight and bias drawn from a scaled Gaussian.
pub fn random_mlp(rng: &mut impl Rng, input: usize, hidden: &[usize], classes: usize) -> ModelParams {
    let spec = MlpSpec::new(input, hidden, classes).unwrap();
    let mut p = ModelParams::init(&spec, rng).unwrap();
    for layer in p.layers_mut() {
        let (_, fan_in) = layer.weight.dims2().unwrap();
        let s = (2.0 / fan_in as f64).sqrt();
        for w in layer.weight.data_mut() {
            *w = s * gaussian(rng);
        }
        for b in layer.bias.data_mut() {
            *b = 0.3 * gaussian(rng);
        }
    }
    p
}

pub fn random_shape(rng: &mut impl Rng, max_in: usize, max_hidden: usize, max_classes: usize) -> (usize, Vec<usize>, usize) {
    let input = rng.random_range(1..=max_in);
    let depth = rng.random_range(1..=2);
    let hidden = (0..depth).map(|_| rng.random_range(1..=max_hidden)).collect();
    (input, hidden, rng.random_range(1..=max_classes))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences of `f` over every parameter entry, flattened in
/// [`ModelParams::tensors`] order.
fn fd_params(params: &ModelParams, h: f64, mut f: impl FnMut(&ModelParams) -> f64) -> Vec<f64> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    let mut p = params.clone();
    for (ti, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let orig = p.tensors()[ti].data()[j];
            p.tensors_mut()[ti].data_mut()[j] = orig + h;
            let up = f(&p);
            p.tensors_mut()[ti].data_mut()[j] = orig - h;
            let down = f(&p);
            p.tensors_mut()[ti].data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn log_prob_sum(params: &ModelParams, x: &[f64]) -> f64 {
    let z = params.logits(&Tensor::matrix(1, x.len(), x.to_vec()).unwrap()).unwrap();
    let z = z.data();
    if z.len() == 1 {
        return z[0];
    }
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).sum()
}

/// Smallest `|pre-activation|` over the hidden units at `x`.
pub fn min_abs_preactivation(params: &ModelParams, x: &[f64]) -> f64 {
    let layers = params.layers();
    let mut a = x.to_vec();
    let mut min = f64::INFINITY;
    for layer in &layers[..layers.len() - 1] {
        let (out, inp) = layer.weight.dims2().unwrap();
        let w = layer.weight.data();
        a = (0..out)
            .map(|k| {
                let z = (0..inp).map(|j| w[k * inp + j] * a[j]).sum::<f64>() + layer.bias.data()[k];
                min = min.min(z.abs());
                z.max(0.0)
            })
            .collect();
    }
    min
}

pub struct GradCheck {
    pub param_err: f64,
    pub input_err: f64,
    pub double_err: f64,
}

/// Reverse-mode against central differences on one random net and batch.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (input, hidden, classes) = random_shape(&mut r, 5, 6, 4);
    let params = random_mlp(&mut r, input, &hidden, classes);
    let n = r.random_range(1..=3);
    let mut x: Vec<f64> = (0..n * input).map(|_| gaussian(&mut r)).collect();
    while x.chunks(input).any(|row| min_abs_preactivation(&params, row) < 1e-3) {
        x = (0..n * input).map(|_| gaussian(&mut r)).collect();
    }
    let m: Vec<f64> = (0..n * input).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes.max(2))).collect();
    let batch = Batch {
        x: Tensor::matrix(n, input, x.clone()).unwrap(),
        m: Tensor::matrix(n, input, m).unwrap(),
        groups: labels.clone(),
        labels,
    };
    let h = 1e-6;
    let flat = |g: Vec<Tensor>| g.into_iter().flat_map(|t| t.into_data()).collect::<Vec<f64>>();

    let erm = TrainingConfig {
        method: Method::Erm,
        beta: r.random_range(0.0..0.1),
        ..TrainingConfig::default()
    };
    let (_, g) = total_loss_grad(&params, &batch, &erm, 1.0, 1.0, &mut rng(0)).unwrap();
    let fd = fd_params(&params, h, |p| total_loss(p, &batch, &erm, 1.0, &mut rng(0)).unwrap());
    let param_err = rel_err(&flat(g), &fd);

    let is = importance_scores(&params, &batch.x).unwrap();
    let mut input_err: f64 = 0.0;
    for i in 0..n {
        let row = &x[i * input..(i + 1) * input];
        let fd: Vec<f64> = (0..input)
            .map(|j| {
                let mut a = row.to_vec();
                let mut b = row.to_vec();
                a[j] += h;
                b[j] -= h;
                (log_prob_sum(&params, &a) - log_prob_sum(&params, &b)) / (2.0 * h)
            })
            .collect();
        input_err = input_err.max(rel_err(is.row(i), &fd));
    }

    let reg = TrainingConfig {
        method: Method::GradReg,
        lambda: r.random_range(0.5..5.0),
        ..TrainingConfig::default()
    };
    let (_, g) = total_loss_grad(&params, &batch, &reg, 1.0, 1.0, &mut rng(0)).unwrap();
    let fd = fd_params(&params, h, |p| total_loss(p, &batch, &reg, 1.0, &mut rng(0)).unwrap());
    let double_err = rel_err(&flat(g), &fd);

    GradCheck {
        param_err,
        input_err,
        double_err,
    }
}

pub fn criterion_gradients(nets: u64) -> (bool, String) {
    let (mut p, mut i, mut d) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..nets {
        let c = gradient_check(seed);
        p = p.max(c.param_err);
        i = i.max(c.input_err);
        d = d.max(c.double_err);
    }
    (
        p < 1e-5 && i < 1e-5 && d < 1e-4,
        format!("{nets} nets: max rel err params {p:.1e}, inputs {i:.1e}, double backprop {d:.1e}"),
    )
}

/// Uniform draw from a box, with each coordinate snapped to an endpoint a
/// quarter of the time.
pub fn sample_in_box(rng: &mut impl Rng, bx: &BoxInterval) -> Vec<f64> {
    bx.lower()
        .iter()
        .zip(bx.upper())
        .map(|(&l, &u)| match rng.random_range(0..8u8) {
            0 => l,
            1 => u,
            _ => l + (u - l) * rng.random::<f64>(),
        })
        .collect()
}

pub struct IbpCheck {
    pub violations: usize,
    pub worst_excess: f64,
}

/// Sampled logits of one random net against its propagated bounds.
pub fn ibp_soundness(seed: u64, samples: usize) -> IbpCheck {
    let mut r = rng(seed);
    let (input, hidden, classes) = random_shape(&mut r, 12, 16, 5);
    let params = random_mlp(&mut r, input, &hidden, classes);
    let x: Vec<f64> = (0..input).map(|_| r.random_range(0.0..1.0)).collect();
    let m: Vec<f64> = (0..input).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let kappa = r.random_range(0.0..1.0);
    let clamp = r.random::<bool>().then_some((0.0, 1.0));
    let bx = input_box(&x, &m, kappa, clamp).unwrap();
    let out = propagate(&params, &bx).unwrap();
    let mut pts = Vec::with_capacity(samples * input);
    for _ in 0..samples {
        pts.extend(sample_in_box(&mut r, &bx));
    }
    let z = params.logits(&Tensor::matrix(samples, input, pts).unwrap()).unwrap();
    let mut check = IbpCheck {
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
    };
    for i in 0..samples {
        for (k, &v) in z.row(i).iter().enumerate() {
            let excess = (out.lower()[k] - v).max(v - out.upper()[k]);
            check.worst_excess = check.worst_excess.max(excess);
            let tol = 1e-12 * (1.0 + v.abs());
            if excess > tol {
                check.violations += 1;
            }
        }
    }
    check
}

/// Largest gap between single-affine-layer bounds and the extremes over the
/// box corners.
pub fn affine_corner_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(1..=8);
    let out = r.random_range(1..=5);
    let w = Tensor::matrix(out, d, (0..out * d).map(|_| gaussian(&mut r)).collect()).unwrap();
    let b = Tensor::vector((0..out).map(|_| gaussian(&mut r)).collect());
    let x: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
    let m: Vec<f64> = (0..d).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let bx = input_box(&x, &m, r.random_range(0.0..2.0), None).unwrap();
    let got = propagate_affine(&w, &b, &bx).unwrap();
    let mut lo = vec![f64::INFINITY; out];
    let mut hi = vec![f64::NEG_INFINITY; out];
    for corner in 0..(1u32 << d) {
        let z: Vec<f64> = (0..d)
            .map(|j| if corner >> j & 1 == 1 { bx.upper()[j] } else { bx.lower()[j] })
            .collect();
        for k in 0..out {
            let v = (0..d).map(|j| w.data()[k * d + j] * z[j]).sum::<f64>() + b.data()[k];
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    (0..out)
        .map(|k| (got.lower()[k] - lo[k]).abs().max((got.upper()[k] - hi[k]).abs()))
        .fold(0.0, f64::max)
}

pub fn criterion_ibp(nets: u64, samples: usize) -> (bool, String) {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..nets {
        let c = ibp_soundness(seed, samples);
        violations += c.violations;
        worst = worst.max(c.worst_excess);
    }
    let gap = (0..nets).map(|s| affine_corner_gap(1000 + s)).fold(0.0, f64::max);
    (
        violations == 0 && gap <= 1e-12,
        format!("{nets} nets x {samples} points: {violations} violations (max excess {worst:.1e}); affine corner gap {gap:.1e}"),
    )
}

/// PGD on a random binary linear model against the best masked corner.
pub fn pgd_linear_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(1..=8);
    let logits = r.random_range(1..=2);
    let w = Tensor::matrix(logits, d, (0..logits * d).map(|_| gaussian(&mut r)).collect()).unwrap();
    let b = Tensor::vector((0..logits).map(|_| gaussian(&mut r)).collect());
    let params = ModelParams::linear(&w, &b).unwrap();
    let x: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
    let mut m: Vec<f64> = (0..d).map(|_| f64::from(r.random_range(0..2u8))).collect();
    m[r.random_range(0..d)] = 1.0;
    let y = r.random_range(0..2);
    let kappa = r.random_range(0.05..2.0);
    let cfg = PerturbConfig {
        kappa,
        ..PerturbConfig::default()
    };
    let delta = pgd_attack(&params, &x, y, &m, &cfg, &mut rng(seed)).unwrap();

    let masked: Vec<usize> = (0..d).filter(|&j| m[j] == 1.0).collect();
    let loss = |delta: &[f64]| {
        let z: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
        task_loss(params.logits(&Tensor::vector(z)).unwrap().data(), y).unwrap()
    };
    let mut best = (f64::NEG_INFINITY, vec![0.0; d]);
    for corner in 0..(1u32 << masked.len()) {
        let mut cand = vec![0.0; d];
        for (bit, &j) in masked.iter().enumerate() {
            cand[j] = if corner >> bit & 1 == 1 { kappa } else { -kappa };
        }
        let l = loss(&cand);
        if l > best.0 {
            best = (l, cand);
        }
    }
    delta.iter().zip(&best.1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn criterion_pgd(models: u64) -> (bool, String) {
    let gaps: Vec<f64> = (0..models).map(pgd_linear_gap).collect();
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    let exact = gaps.iter().filter(|&&g| g <= 1e-12).count();
    (
        exact as u64 == models,
        format!("{exact}/{models} linear models at the masked-corner optimum (max gap {worst:.1e})"),
    )
}

/// `Σ⁻¹ 1 / (1ᵀ Σ⁻¹ 1)` for the noise covariance of the augmented
/// features, by dense inversion.
pub fn prop1_gls_oracle(d: usize, k: f64) -> Vec<f64> {
    let p = d + 1;
    let sigma = DMatrix::from_fn(p, p, |i, j| match (i == j, i < d) {
        (false, _) => 0.0,
        (true, true) => 1.0,
        (true, false) => 1.0 / k,
    });
    let inv = sigma.try_inverse().unwrap();
    let v = inv * DVector::from_element(p, 1.0);
    let s = v.sum();
    v.iter().map(|x| x / s).collect()
}

pub fn criterion_prop1() -> (bool, String) {
    let mut err: f64 = 0.0;
    let mut decreasing = true;
    for k in [1.0, 4.0] {
        let mut prev = f64::INFINITY;
        for d in [1, 2, 5, 10] {
            let w = prop1_weights(d, k).unwrap();
            for oracle in [prop1_population_oracle(d, k).unwrap(), prop1_gls_oracle(d, k)] {
                err = err.max(w.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            let last = w[d];
            decreasing &= last < prev && (last - k / (k + d as f64)).abs() < 1e-15;
            prev = last;
        }
    }
    (
        err < 1e-10 && decreasing,
        format!("max oracle error {err:.1e}; relevant weight decreasing in D: {decreasing}"),
    )
}

pub fn criterion_theory() -> ((bool, String), VerificationReport) {
    let rep = verify(&TheoryConfig::default()).unwrap();
    let ok = rep.thm1.pass_rate >= 0.95 && rep.thm2.passes == rep.thm2.trials;
    (
        (
            ok,
            format!(
                "theorem 1: {}/{} draws ({:.1}%, worst margin {:.2e}); theorem 2: {}/{} setups (worst margin {:.2e}, {} draws rejected)",
                rep.thm1.passes,
                rep.thm1.trials,
                100.0 * rep.thm1.pass_rate,
                rep.thm1.worst_margin,
                rep.thm2.passes,
                rep.thm2.trials,
                rep.thm2.worst_margin,
                rep.thm2_rejected
            ),
        ),
        rep,
    )
}

pub const TOY_EPOCHS: usize = 200;
pub const TOY_GRID: ((f64, f64), (f64, f64), usize) = ((-6.0, 6.0), (-6.0, 6.0), 71);

pub fn toy_config(method: Method, beta: f64) -> TrainingConfig {
    TrainingConfig {
        method,
        beta,
        lambda: 10.0,
        epsilon: 6.0,
        learning_rate: 1e-2,
        batch_size: 128,
        epochs: TOY_EPOCHS,
        selection: Selection::Last,
        ..TrainingConfig::default()
    }
}

/// x₂-flip fraction of the boundary learned on toy-2D, with the run time.
pub fn toy_flip(data: &DatasetSplits, cfg: &TrainingConfig) -> (f64, Duration) {
    let t = Instant::now();
    let out = train(data, &MlpSpec::toy2d(), cfg).unwrap();
    let elapsed = t.elapsed();
    let (x1, x2, res) = TOY_GRID;
    (boundary_grid(&out.params, x1, x2, res).unwrap().flip_fraction(), elapsed)
}

pub fn criterion_toy() -> (bool, String) {
    let data = gen_toy2d(400, 0).unwrap();
    let (gr0, t1) = toy_flip(&data, &toy_config(Method::GradReg, 0.0));
    let (ibp0, t2) = toy_flip(&data, &toy_config(Method::IbpEx, 0.0));
    let (gr1, t3) = toy_flip(&data, &toy_config(Method::GradReg, 1.0));
    let slowest = t1.max(t2).max(t3);
    (
        gr0 > 0.2 && ibp0 < 0.05 && gr1 < 0.05 && slowest < Duration::from_secs(300),
        format!(
            "flip fraction: grad-reg beta=0 {gr0:.3} (need > 0.2), ibp-ex beta=0 {ibp0:.3} (< 0.05), grad-reg beta=1 {gr1:.3} (< 0.05); slowest run {slowest:.1?}"
        ),
    )
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Decoy-MNIST at acceptance scale from `data/mnist`, or `None` when the
/// raw files are absent.
pub fn decoy_data(sizes: DecoySizes) -> Option<DatasetSplits> {
    let dir = repo_root().join("data/mnist");
    let file = |stem: &str| {
        [format!("{stem}.gz"), stem.to_string()]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
    };
    let train_raw = load_idx(&file("train-images-idx3-ubyte")?, &file("train-labels-idx1-ubyte")?).ok()?;
    let test_raw = load_idx(&file("t10k-images-idx3-ubyte")?, &file("t10k-labels-idx1-ubyte")?).ok()?;
    Some(build_decoy_mnist(&train_raw, &test_raw, 0, sizes).unwrap())
}

pub const DECOY_HIDDEN: [usize; 2] = [512, 512];
pub const DECOY_EPOCHS: usize = 15;

pub fn decoy_config(method: Method) -> TrainingConfig {
    let epsilon = match method {
        Method::IbpEx | Method::IbpGrad => 0.5,
        _ => 0.8,
    };
    TrainingConfig {
        method,
        lambda: 0.1,
        epsilon,
        learning_rate: 3e-3,
        batch_size: 128,
        epochs: DECOY_EPOCHS,
        clamp: Some((0.0, 1.0)),
        ..TrainingConfig::default()
    }
}

pub const DECOY_METHODS: [Method; 5] = [Method::Erm, Method::GradReg, Method::PgdEx, Method::IbpEx, Method::PgdGrad];

pub struct DecoyRun {
    pub method: Method,
    pub report: MetricsReport,
    pub elapsed: Duration,
}

pub fn decoy_runs(data: &DatasetSplits) -> Vec<DecoyRun> {
    let spec = MlpSpec::new(data.input_dim, &DECOY_HIDDEN, data.classes).unwrap();
    DECOY_METHODS
        .iter()
        .map(|&method| {
            let t = Instant::now();
            let out = train(data, &spec, &decoy_config(method)).unwrap();
            let opts = EvalOptions {
                rcs_sigma: None,
                saliency: true,
            };
            let report = evaluate(&out.params, &data.test, opts, &mut stream(0, Stream::Rcs)).unwrap();
            DecoyRun {
                method,
                report,
                elapsed: t.elapsed(),
            }
        })
        .collect()
}

pub fn criterion_decoy_order(runs: &[DecoyRun]) -> (bool, String) {
    let wg = |m: Method| runs.iter().find(|r| r.method == m).unwrap().report.wg_acc;
    let erm = wg(Method::Erm);
    let (gr, pgd, ibp, comb) = (wg(Method::GradReg), wg(Method::PgdEx), wg(Method::IbpEx), wg(Method::PgdGrad));
    let ordering = erm < gr && erm < pgd && erm < ibp && comb >= pgd + 0.05 && comb >= gr + 0.05;
    let targets = erm < 0.30 && comb > 0.80;
    (
        ordering && targets,
        format!(
            "test wg acc: erm {:.1}, grad-reg {:.1}, pgd-ex {:.1}, ibp-ex {:.1}, pgd+grad {:.1}; ordering {}, desk targets (erm < 30, combined > 80) {}",
            100.0 * erm,
            100.0 * gr,
            100.0 * pgd,
            100.0 * ibp,
            100.0 * comb,
            if ordering { "holds" } else { "fails" },
            if targets { "met" } else { "missed" }
        ),
    )
}

pub fn criterion_saliency(runs: &[DecoyRun]) -> (bool, String) {
    let get = |m: Method| &runs.iter().find(|r| r.method == m).unwrap().report;
    let (g, i) = (get(Method::GradReg), get(Method::IbpEx));
    let (s1g, s2g, s1i, s2i) = (g.s1.unwrap(), g.s2.unwrap_or(f64::NAN), i.s1.unwrap(), i.s2.unwrap_or(f64::NAN));
    (
        s1g < s1i && s2i < s2g,
        format!("grad-reg (s1 {s1g:.3e}, s2 {s2g:.3}) vs ibp-ex (s1 {s1i:.3e}, s2 {s2i:.3})"),
    )
}

/// Exact counts for a random labelled prediction set, built from a
/// confusion table so the oracle never looks at the flattened lists.
pub fn metric_oracle_case(seed: u64) -> (f64, f64, f64, f64) {
    let mut r = rng(seed);
    let classes = r.random_range(2..=6);
    let groups = r.random_range(1..=4);
    // counts[g][y][p]
    let mut counts = vec![vec![vec![0usize; classes]; classes]; groups];
    for g in counts.iter_mut() {
        for row in g.iter_mut() {
            for c in row.iter_mut() {
                *c = if r.random_range(0..3) == 0 { 0 } else { r.random_range(0..20) };
            }
        }
    }
    counts[0][0][0] += 1;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut group_ids = Vec::new();
    for (g, tab) in counts.iter().enumerate() {
        for (y, row) in tab.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    preds.push(p);
                    labels.push(y);
                    group_ids.push(g);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.shuffle(&mut r);
    let pick = |v: &[usize]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let (preds, labels, group_ids) = (pick(&preds), pick(&labels), pick(&group_ids));

    let mut class_accs = Vec::new();
    for y in 0..classes {
        let total: usize = counts.iter().map(|t| t[y].iter().sum::<usize>()).sum();
        if total > 0 {
            let hit: usize = counts.iter().map(|t| t[y][y]).sum();
            class_accs.push(hit as f64 / total as f64);
        }
    }
    let macro_oracle = class_accs.iter().sum::<f64>() / class_accs.len() as f64;
    let wg_oracle = counts
        .iter()
        .filter_map(|t| {
            let total: usize = t.iter().flatten().sum();
            let hit: usize = (0..classes).map(|y| t[y][y]).sum();
            (total > 0).then(|| hit as f64 / total as f64)
        })
        .fold(f64::INFINITY, f64::min);
    (
        macro_avg_accuracy(&preds, &labels).unwrap(),
        macro_oracle,
        worst_group_accuracy(&preds, &labels, &group_ids).unwrap(),
        wg_oracle,
    )
}

pub fn criterion_metrics(cases: u64) -> (bool, String) {
    let rcs_ok = [(0.5, 0.5, 0.0), (1.0, 0.5, 100.0), (0.9, 0.6, 60.0)]
        .iter()
        .all(|&(c, s, want)| (rcs_from_accuracies(c, s).unwrap() - want).abs() < 1e-12);
    let mut mismatches = 0;
    for seed in 0..cases {
        let (m, mo, w, wo) = metric_oracle_case(seed);
        if (m - mo).abs() > 1e-12 || (w - wo).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    (
        rcs_ok && mismatches == 0,
        format!("RCS cases exact: {rcs_ok}; {mismatches}/{cases} confusion configurations disagree with the oracle"),
    )
}

/// Median wall time of `total_loss_grad` steps for PGD-Ex and IBP-Ex on
/// one Decoy-MNIST-sized model and batch.
pub fn step_times(batch: &Batch, reps: usize) -> (Duration, Duration) {
    let spec = MlpSpec::new(batch.x.shape()[1], &DECOY_HIDDEN, 10).unwrap();
    let params = ModelParams::init(&spec, &mut stream(0, Stream::Init)).unwrap();
    let time = |method: Method| {
        let cfg = decoy_config(method);
        let mut r = stream(0, Stream::Pgd);
        total_loss_grad(&params, batch, &cfg, 1.0, 1.0, &mut r).unwrap();
        let mut ts: Vec<Duration> = (0..reps)
            .map(|_| {
                let t = Instant::now();
                total_loss_grad(&params, batch, &cfg, 1.0, 1.0, &mut r).unwrap();
                t.elapsed()
            })
            .collect();
        ts.sort();
        ts[reps / 2]
    };
    (time(Method::PgdEx), time(Method::IbpEx))
}

/// A 128-row batch of Decoy-MNIST training data, or of random images with
/// the same half masks when the raw files are absent.
pub fn timing_batch(data: Option<&DatasetSplits>) -> Batch {
    match data {
        Some(d) => Batch::gather(&d.train, &(0..128).collect::<Vec<_>>()).unwrap(),
        None => {
            let mut r = rng(7);
            let d = 3 * 28 * 28;
            let x: Vec<f64> = (0..128 * d).map(|_| r.random::<f64>()).collect();
            let m: Vec<f64> = (0..128 * d).map(|j| f64::from((j % 28) < 14)).collect();
            let labels: Vec<usize> = (0..128).map(|i| i % 10).collect();
            Batch {
                x: Tensor::matrix(128, d, x).unwrap(),
                m: Tensor::matrix(128, d, m).unwrap(),
                groups: labels.clone(),
                labels,
            }
        }
    }
}

pub fn criterion_cost(batch: &Batch) -> (bool, String) {
    let (pgd, ibp) = step_times(batch, 5);
    let ratio = pgd.as_secs_f64() / ibp.as_secs_f64();
    (
        ratio > 1.5,
        format!("median step: pgd-ex {pgd:.1?}, ibp-ex {ibp:.1?}, ratio {ratio:.2} (need > 1.5)"),
    )
}

pub fn toy_experiment_json(cache: &std::path::Path, epochs: usize) -> String {
    serde_json::json!({
        "seed": 3,
        "dataset": { "name": "toy2d", "toy_n": 200, "cache_dir": cache },
        "training": { "method": "ibp-ex", "epsilon": 2.0, "epochs": epochs, "learning_rate": 0.01 },
        "eval": { "grid_resolution": 21 },
        "theory": { "thm1_draws": 50, "thm2_setups": 5, "prop1_samples": 20000 },
        "sweep": [
            { "method": "erm" },
            { "method": "grad-reg", "lambda": 10.0 },
            { "method": "pgd-ex", "epsilon": 1.0 },
            { "method": "ibp-ex", "epsilon": 2.0 },
            { "method": "pgd+grad", "epsilon": 1.0, "lambda": 10.0 }
        ],
        "sweep_workers": 2
    })
    .to_string()
}

/// Every subcommand run twice into fresh directories; returns the names of
/// artifacts whose bytes differ.
pub fn rerun_differences(epochs: usize) -> Vec<String> {
    use mlx_core::config::ExperimentConfig;
    use mlx_core::run::{run, Command};

    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&toy_experiment_json(&tmp.path().join("cache"), epochs)).unwrap();
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for pass in 0..2 {
        let out = tmp.path().join(format!("run{pass}"));
        let mut files = Vec::new();
        for cmd in Command::ALL {
            let res = run(cmd, &cfg, Some(&out), |_| {}).unwrap();
            for path in res.artifacts {
                let name = format!("{}:{}", cmd.name(), path.file_name().unwrap().to_string_lossy());
                files.push((name, std::fs::read(&path).unwrap()));
            }
        }
        outputs.push(files);
    }
    let mut differing: Vec<String> = outputs[0]
        .iter()
        .zip(&outputs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.clone())
        .collect();
    if outputs[0].len() != outputs[1].len() {
        differing.push("artifact count".into());
    }
    differing
}

pub fn criterion_determinism() -> (bool, String) {
    let diff = rerun_differences(5);
    (
        diff.is_empty(),
        if diff.is_empty() {
            "all six subcommands reproduce byte-identical artifacts".to_string()
        } else {
            format!("differing artifacts: {}", diff.join(", "))
        },
    )
}
