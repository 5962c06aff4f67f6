//! Numerical checks for the Gaussian-process analysis of gradient
//! supervision versus robust coverage, and for the noise-averaging
//! regression weights.
//!
//! The GP uses the squared-exponential kernel
//! `k(x, x') = exp(-Σᵢ (xᵢ - x'ᵢ)² / (2 θᵢ²))` with a `Gamma(α, β)` prior
//! (shape `α`, rate `β`) on each `θᵢ⁻²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const KERNEL_JITTER: f64 = 1e-8;

/// Training points with value and `∂f/∂x₂` observations.
#[derive(Clone, Debug, PartialEq)]
pub struct GpSetup {
    pub points: Vec<[f64; 2]>,
    pub y: Vec<f64>,
    /// Observed `∂f/∂x₂` at each point.
    pub grad_obs: Vec<f64>,
    /// Gamma shape.
    pub alpha: f64,
    /// Gamma rate.
    pub beta: f64,
    /// Length scales at which `ỹ = K̂⁻¹ ŷ` is solved.
    pub theta_ref: (f64, f64),
}

impl GpSetup {
    pub fn new(points: Vec<[f64; 2]>, y: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let n = points.len();
        let setup = GpSetup {
            points,
            y,
            grad_obs: vec![0.0; n],
            alpha,
            beta,
            theta_ref: (1.0, 1.0),
        };
        setup.validate()?;
        Ok(setup)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 || self.y.len() != n || self.grad_obs.len() != n {
            return Err(Error::InvalidArgument(
                "GP setup needs matching, non-empty points, values and gradient observations".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidArgument("Gamma shape and rate must be > 0".into()));
        }
        if !(self.theta_ref.0 > 0.0 && self.theta_ref.1 > 0.0) {
            return Err(Error::InvalidArgument("length scales must be > 0".into()));
        }
        Ok(())
    }

    fn n(&self) -> usize {
        self.points.len()
    }
}

fn se(a: &[f64; 2], b: &[f64; 2], t1: f64, t2: f64) -> f64 {
    (-0.5 * ((a[0] - b[0]).powi(2) / (t1 * t1) + (a[1] - b[1]).powi(2) / (t2 * t2))).exp()
}

/// The `2N × 2N` covariance of `[f(x⁽¹⁾) … f(x⁽ᴺ⁾), ∂₂f(x⁽¹⁾) … ∂₂f(x⁽ᴺ⁾)]`.
pub fn augmented_kernel(setup: &GpSetup, theta1: f64, theta2: f64) -> Result<DMatrix<f64>> {
    setup.validate()?;
    if !(theta1 > 0.0 && theta2 > 0.0) {
        return Err(Error::InvalidArgument("length scales must be > 0".into()));
    }
    let n = setup.n();
    let t2sq = theta2 * theta2;
    let mut k = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (&setup.points[i], &setup.points[j]);
            let base = se(a, b, theta1, theta2);
            let d2 = a[1] - b[1];
            k[(i, j)] = base;
            k[(i, n + j)] = d2 / t2sq * base;
            k[(n + i, j)] = -d2 / t2sq * base;
            k[(n + i, n + j)] = (1.0 / t2sq - d2 * d2 / (t2sq * t2sq)) * base;
        }
    }
    Ok(k)
}

fn solve_spd(mut k: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    for i in 0..k.nrows() {
        k[(i, i)] += KERNEL_JITTER;
    }
    let chol = k.cholesky().ok_or(Error::Singular)?;
    let sol = chol.solve(rhs);
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(Error::Singular)
    }
}

/// `ỹ = (K̂ + jitter I)⁻¹ ŷ` at the reference length scales.
pub fn augmented_weights(setup: &GpSetup) -> Result<Vec<f64>> {
    let k = augmented_kernel(setup, setup.theta_ref.0, setup.theta_ref.1)?;
    let yhat = DVector::from_iterator(
        2 * setup.n(),
        setup.y.iter().chain(&setup.grad_obs).copied(),
    );
    Ok(solve_spd(k, &yhat)?.iter().copied().collect())
}

fn half_sq(a: f64, b: f64) -> f64 {
    0.5 * (a - b).powi(2)
}

/// Posterior mean averaged over the Gamma prior on both inverse squared
/// length scales, with `ỹ` held at its reference-θ value.
pub fn gp_posterior_mean_marginalized(setup: &GpSetup, ytilde: &[f64], x: [f64; 2]) -> Result<f64> {
    let n = setup.n();
    if ytilde.len() != 2 * n {
        return Err(Error::shape("gp_posterior_mean", format!("ỹ has {} entries, need {}", ytilde.len(), 2 * n)));
    }
    let (a, b) = (setup.alpha, setup.beta);
    let mut f = 0.0;
    for (k, p) in setup.points.iter().enumerate() {
        let a1 = 1.0 / (1.0 + half_sq(x[0], p[0]) / b);
        let d2 = half_sq(x[1], p[1]);
        let a2 = 1.0 / (1.0 + d2 / b);
        let grad_term = (a / b) * (x[1] - p[1]) * a2 * ytilde[n + k];
        f += a1.powf(a) * a2.powf(a) * (ytilde[k] + grad_term);
    }
    Ok(f)
}

/// `(f(x + [0, δ]) - f(x), bound)` where the bound is the explicit sum the
/// lower-bound derivation arrives at before its asymptotic collapse.
pub fn thm1_gap_and_bound(setup: &GpSetup, ytilde: &[f64], x: [f64; 2], delta: f64) -> Result<(f64, f64)> {
    let gap = setup
        .points
        .iter()
        .map(|p| (x[1] - p[1]).abs())
        .fold(f64::INFINITY, f64::min);
    if delta.abs() > 0.01 * gap {
        return Err(Error::InvalidArgument(format!(
            "perturbation {delta} outside the regime |δ| <= 0.01 · {gap}"
        )));
    }
    let lhs = gp_posterior_mean_marginalized(setup, ytilde, [x[0], x[1] + delta])?
        - gp_posterior_mean_marginalized(setup, ytilde, x)?;
    let n = setup.n();
    let (a, b) = (setup.alpha, setup.beta);
    let mut sum = 0.0;
    for (k, p) in setup.points.iter().enumerate() {
        let a1 = 1.0 / (1.0 + half_sq(x[0], p[0]) / b);
        let d2 = half_sq(x[1], p[1]);
        let a2 = 1.0 / (1.0 + d2 / b);
        let u = x[1] - p[1];
        let inner = (a + 1.0) * ytilde[n + k] * (2.0 * u * (u + delta) / (b + d2) - 1.0) - ytilde[k];
        sum += a1.powf(a) * a2.powf(a + 1.0) * inner;
    }
    Ok((lhs, 2.0 * delta * a / b * sum))
}

/// A regular grid over `[x1_lo, x1_hi] × [x2_lo, x2_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl Grid2 {
    pub fn regular(x1: (f64, f64), x2: (f64, f64), n1: usize, n2: usize) -> Result<Self> {
        if n1 < 2 || n2 < 2 {
            return Err(Error::InvalidArgument("grid needs at least 2 points per axis".into()));
        }
        let lin = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        };
        Ok(Grid2 {
            x1: lin(x1, n1),
            x2: lin(x2, n2),
        })
    }
}

/// Coverage of a low-loss set on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageQuery {
    pub phi: f64,
    /// Number of grid points with loss below `phi`.
    pub covered: usize,
    /// Largest `x₂` distance from a grid point to the nearest covered point
    /// in the same `x₁` column.
    pub c: f64,
    /// Largest `x₂` distance from a grid point to the nearest covered point
    /// anywhere in the grid.
    pub c_global: f64,
}

/// `loss[i][j]` is the loss at `(grid.x1[i], grid.x2[j])`. A column with no
/// covered point leaves `c` undefined.
pub fn coverage_estimate(grid: &Grid2, loss: &[Vec<f64>], phi: f64) -> Result<CoverageQuery> {
    if loss.len() != grid.x1.len() || loss.iter().any(|c| c.len() != grid.x2.len()) {
        return Err(Error::shape("coverage_estimate", "loss table does not match grid"));
    }
    let covered_x2: Vec<f64> = loss
        .iter()
        .flat_map(|col| col.iter().zip(&grid.x2).filter(|(l, _)| **l < phi).map(|(_, &x2)| x2))
        .collect();
    if covered_x2.is_empty() {
        return Err(Error::Undefined(format!("no grid point has loss below {phi}")));
    }
    let nearest = |x2: f64, pool: &mut dyn Iterator<Item = f64>| -> f64 {
        pool.map(|h| (x2 - h).abs()).fold(f64::INFINITY, f64::min)
    };
    let c_global = grid
        .x2
        .iter()
        .map(|&x2| nearest(x2, &mut covered_x2.iter().copied()))
        .fold(0.0, f64::max);
    let mut c = 0.0f64;
    for col in loss {
        let pool: Vec<f64> = col
            .iter()
            .zip(&grid.x2)
            .filter(|(l, _)| **l < phi)
            .map(|(_, &x2)| x2)
            .collect();
        if pool.is_empty() {
            return Err(Error::Undefined(format!("a grid column has no loss below {phi}")));
        }
        for &x2 in &grid.x2 {
            c = c.max(nearest(x2, &mut pool.iter().copied()));
        }
    }
    Ok(CoverageQuery {
        phi,
        covered: covered_x2.len(),
        c,
        c_global,
    })
}

/// Noise-free GP regression with an isotropic SE kernel at fixed `θ`.
#[derive(Clone, Debug)]
pub struct FixedThetaGp {
    points: Vec<[f64; 2]>,
    theta: f64,
    weights: Vec<f64>,
}

impl FixedThetaGp {
    pub fn fit(points: Vec<[f64; 2]>, y: &[f64], theta: f64) -> Result<Self> {
        if points.is_empty() || points.len() != y.len() {
            return Err(Error::InvalidArgument("GP fit needs matching, non-empty points and values".into()));
        }
        if !(theta > 0.0) {
            return Err(Error::InvalidArgument("length scale must be > 0".into()));
        }
        let n = points.len();
        let k = DMatrix::from_fn(n, n, |i, j| se(&points[i], &points[j], theta, theta));
        let w = solve_spd(k, &DVector::from_column_slice(y))?;
        Ok(FixedThetaGp {
            points,
            theta,
            weights: w.iter().copied().collect(),
        })
    }

    pub fn mean(&self, x: [f64; 2]) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * se(&x, p, self.theta, self.theta))
            .sum()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }
}

/// Both sides of the fixed-θ coverage inequality
/// `max |f(x + [0, δ]) - f(x)| <= 2 C δ_max f_max / θ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm2Result {
    pub lhs: f64,
    pub rhs: f64,
    pub coverage: CoverageQuery,
    pub delta_max: f64,
    pub f_max: f64,
}

impl Thm2Result {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// `target(x₁)` is the label function; the loss is `(f - target)²`.
/// `delta_steps` is the perturbation in `x₂` grid steps.
pub fn thm2_check(
    gp: &FixedThetaGp,
    target: impl Fn(f64) -> f64,
    grid: &Grid2,
    delta_steps: usize,
    phi: f64,
) -> Result<Thm2Result> {
    let f: Vec<Vec<f64>> = grid
        .x1
        .iter()
        .map(|&a| grid.x2.iter().map(|&b| gp.mean([a, b])).collect())
        .collect();
    let loss: Vec<Vec<f64>> = f
        .iter()
        .zip(&grid.x1)
        .map(|(col, &a)| col.iter().map(|v| (v - target(a)).powi(2)).collect())
        .collect();
    let coverage = coverage_estimate(grid, &loss, phi)?;
    let mut lhs = 0.0f64;
    for col in &f {
        for j in 0..col.len().saturating_sub(delta_steps) {
            lhs = lhs.max((col[j + delta_steps] - col[j]).abs());
        }
    }
    let delta_max = grid
        .x1
        .iter()
        .flat_map(|_| grid.x2.iter())
        .map(|&x2| {
            gp.points()
                .iter()
                .map(|p| (x2 - p[1]).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let f_max = f.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    let rhs = 2.0 * coverage.c * delta_max * f_max / (gp.theta() * gp.theta());
    Ok(Thm2Result {
        lhs,
        rhs,
        coverage,
        delta_max,
        f_max,
    })
}

/// Weights of the noise-averaged linear fit: `1/(D+K)` on each of the `D`
/// irrelevant copies of `y`, `K/(K+D)` on the relevant noisy feature.
pub fn prop1_weights(d: usize, k: f64) -> Result<Vec<f64>> {
    if d == 0 || !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("need D >= 1 and K > 0, got D={d}, K={k}")));
    }
    let denom = d as f64 + k;
    let mut w = vec![1.0 / denom; d];
    w.push(k / denom);
    Ok(w)
}

/// Flat-prior least squares on the population moments: every feature is
/// `y` plus independent noise of variance `σᵢ²` (1 on the `D` masked
/// features after unit noise, `1/K` on the relevant one), which reduces to
/// `min wᵀ Σ w` subject to `Σ w = 1`. Solved through its KKT system.
pub fn prop1_population_oracle(d: usize, k: f64) -> Result<Vec<f64>> {
    if d == 0 || !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("need D >= 1 and K > 0, got D={d}, K={k}")));
    }
    let p = d + 1;
    let mut a = DMatrix::zeros(p + 1, p + 1);
    for i in 0..p {
        a[(i, i)] = if i < d { 2.0 } else { 2.0 / k };
        a[(i, p)] = 1.0;
        a[(p, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(p + 1);
    rhs[p] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(Error::Singular)?;
    Ok(sol.iter().take(p).copied().collect())
}

/// Ordinary least squares on `samples` draws of the noise-augmented
/// problem with `y ~ N(0, scale²)`.
pub fn prop1_empirical<R: Rng + ?Sized>(d: usize, k: f64, samples: usize, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    if d == 0 || !(k > 0.0) || samples <= d + 1 {
        return Err(Error::InvalidArgument("need D >= 1, K > 0 and more samples than features".into()));
    }
    let p = d + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    let relevant_sd = (1.0 / k).sqrt();
    for _ in 0..samples {
        let y: f64 = scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        for (i, r) in row.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *r = y + if i < d { e } else { relevant_sd * e };
        }
        for i in 0..p {
            xty[i] += row[i] * y;
            for j in 0..p {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
    }
    let sol = xtx.lu().solve(&xty).ok_or(Error::Singular)?;
    Ok(sol.iter().copied().collect())
}

/// Settings of the verification sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub thm1_draws: usize,
    pub thm2_setups: usize,
    pub grid_points: usize,
    pub phi: f64,
    pub delta_steps: usize,
    pub prop1_samples: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            thm1_draws: 1000,
            thm2_setups: 100,
            grid_points: 41,
            phi: 0.01,
            delta_steps: 2,
            prop1_samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub trials: usize,
    pub passes: usize,
    pub pass_rate: f64,
    /// Smallest `bound_side - value_side` seen (negative means a violation).
    pub worst_margin: f64,
}

impl CheckSummary {
    fn from_margins(margins: &[f64]) -> Self {
        let passes = margins.iter().filter(|&&m| m >= 0.0).count();
        CheckSummary {
            trials: margins.len(),
            passes,
            pass_rate: passes as f64 / margins.len().max(1) as f64,
            worst_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Summary {
    /// Largest deviation from the KKT oracle over the checked `(D, K)`.
    pub max_oracle_error: f64,
    /// Largest deviation from sampled least squares.
    pub max_empirical_error: f64,
    pub relevant_weight_decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub thm1: CheckSummary,
    pub thm2: CheckSummary,
    /// Coverage draws skipped because some grid column had no covered point.
    pub thm2_rejected: usize,
    pub prop1: Prop1Summary,
    /// Smallest eigenvalue of the augmented kernel over the flattening draws.
    pub min_kernel_eigenvalue: f64,
}

/// One random admissible flattening configuration: up to five points in
/// `[-1, 1]²` with values in `[0, 1]` and zero gradient observations,
/// `α, β ∈ [0.5, 3]`, a query point and `δ` inside the regime.
pub fn thm1_draw<R: Rng + ?Sized>(rng: &mut R) -> Result<(GpSetup, [f64; 2], f64)> {
    let n = rng.random_range(1..=5);
    let points: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let alpha = rng.random_range(0.5..3.0);
    let beta = rng.random_range(0.5..3.0);
    let setup = GpSetup::new(points, y, alpha, beta)?;
    let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let gap = setup
        .points
        .iter()
        .map(|p| (x[1] - p[1]).abs())
        .fold(f64::INFINITY, f64::min);
    let delta = rng.random_range(0.0..=1.0) * 0.01 * gap;
    Ok((setup, x, delta))
}

/// One random coverage configuration on `[-1, 1]²`: 5 to 15 training
/// points labelled by `sin(2 x₁)` and a length scale in `[0.3, 1]`.
pub fn thm2_draw<R: Rng + ?Sized>(rng: &mut R) -> Result<FixedThetaGp> {
    let n = rng.random_range(5..=15);
    let points: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let y: Vec<f64> = points.iter().map(|p| thm2_target(p[0])).collect();
    FixedThetaGp::fit(points, &y, rng.random_range(0.3..1.0))
}

pub fn thm2_target(x1: f64) -> f64 {
    (2.0 * x1).sin()
}

pub fn verify(cfg: &TheoryConfig) -> Result<VerificationReport> {
    let mut thm1 = Vec::with_capacity(cfg.thm1_draws);
    let mut min_eig = f64::INFINITY;
    for i in 0..cfg.thm1_draws {
        let mut rng = substream(cfg.seed, Stream::Theory, i as u64);
        let (setup, x, delta) = thm1_draw(&mut rng)?;
        let k = augmented_kernel(&setup, 1.0, 1.0)?;
        min_eig = min_eig.min(k.symmetric_eigenvalues().min());
        let yt = augmented_weights(&setup)?;
        let (lhs, rhs) = thm1_gap_and_bound(&setup, &yt, x, delta)?;
        thm1.push(lhs - rhs);
    }

    let grid = Grid2::regular((-1.0, 1.0), (-1.0, 1.0), cfg.grid_points, cfg.grid_points)?;
    let mut thm2 = Vec::with_capacity(cfg.thm2_setups);
    let mut rejected = 0;
    let mut draw = 0u64;
    while thm2.len() < cfg.thm2_setups {
        if rejected > 20 * cfg.thm2_setups.max(1) {
            return Err(Error::Undefined("too few coverage setups with defined coverage".into()));
        }
        let mut rng = substream(cfg.seed, Stream::Theory, (1 << 32) | draw);
        draw += 1;
        let gp = thm2_draw(&mut rng)?;
        match thm2_check(&gp, thm2_target, &grid, cfg.delta_steps, cfg.phi) {
            Ok(r) => thm2.push(r.rhs - r.lhs),
            Err(Error::Undefined(_)) => rejected += 1,
            Err(e) => return Err(e),
        }
    }

    let mut oracle_err = 0.0f64;
    let mut emp_err = 0.0f64;
    for &d in &[1usize, 2, 5, 10] {
        for &k in &[1.0, 4.0] {
            let w = prop1_weights(d, k)?;
            let o = prop1_population_oracle(d, k)?;
            oracle_err = oracle_err.max(w.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    if cfg.prop1_samples > 0 {
        let mut rng = substream(cfg.seed, Stream::Theory, 2 << 32);
        let w = prop1_weights(3, 1.0)?;
        let e = prop1_empirical(3, 1.0, cfg.prop1_samples, 100.0, &mut rng)?;
        emp_err = w.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    }
    let decreasing = (1..40)
        .map(|d| prop1_weights(d, 4.0).map(|w| w[d]))
        .collect::<Result<Vec<_>>>()?
        .windows(2)
        .all(|w| w[1] < w[0]);

    Ok(VerificationReport {
        thm1: CheckSummary::from_margins(&thm1),
        thm2: CheckSummary::from_margins(&thm2),
        thm2_rejected: rejected,
        prop1: Prop1Summary {
            max_oracle_error: oracle_err,
            max_empirical_error: emp_err,
            relevant_weight_decreasing: decreasing,
        },
        min_kernel_eigenvalue: min_eig,
    })
}
