//! Masked perturbation losses: Gaussian noise averaging (Avg-Ex) and
//! projected sign-gradient ascent (PGD-Ex), both restricted to features
//! where the mask is 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::ComputationRecord;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_per_example, forward_logits, task_loss, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMethod {
    Avg,
    Pgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub method: PerturbMethod,
    /// Noise scale for Avg-Ex.
    pub sigma: f64,
    /// Noise samples per example for Avg-Ex.
    pub samples: usize,
    /// ℓ∞ radius for PGD.
    pub kappa: f64,
    pub steps: usize,
    /// Defaults to `kappa / 4`.
    pub step_size: Option<f64>,
    pub alpha: f64,
    /// Clamp `x + δ` into this range during PGD.
    pub clamp: Option<(f64, f64)>,
    /// Start PGD from a uniform point in the masked box instead of `δ = 0`.
    pub random_start: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            method: PerturbMethod::Pgd,
            sigma: 0.3,
            samples: 4,
            kappa: 0.1,
            steps: 7,
            step_size: None,
            alpha: 1.0,
            clamp: None,
            random_start: false,
        }
    }
}

impl PerturbConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.kappa / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("perturb.{msg}")));
        if !(self.sigma >= 0.0) {
            return bad("sigma must be >= 0");
        }
        if !(self.kappa >= 0.0) {
            return bad("kappa must be >= 0");
        }
        if !(self.step() >= 0.0) {
            return bad("step_size must be >= 0");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.samples == 0 {
            return bad("samples must be >= 1");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return bad("clamp must satisfy lo <= hi");
            }
        }
        Ok(())
    }
}

/// `K` noisy copies of every row, `x + ε ⊙ m` with `ε ~ N(0, σ² I)`.
/// Rows are grouped per example: copies of row `i` occupy rows
/// `i*K .. (i+1)*K`.
pub fn masked_noise_batch<R: Rng + ?Sized>(
    x: &Tensor,
    m: &Tensor,
    sigma: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if m.shape() != x.shape() {
        return Err(Error::shape("masked_noise_batch", format!("x {:?}, m {:?}", x.shape(), m.shape())));
    }
    let mut out = Vec::with_capacity(n * samples * d);
    for i in 0..n {
        let (xi, mi) = (x.row(i), m.row(i));
        for _ in 0..samples {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                out.push(xi[j] + sigma * e * mi[j]);
            }
        }
    }
    Tensor::matrix(n * samples, d, out)
}

/// `(α / K) Σ_j ℓ(f(x + ε_j ⊙ m), y)` for one example.
pub fn avg_ex_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    m: &[f64],
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<f64> {
    cfg.validate()?;
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    let mt = Tensor::matrix(1, m.len(), m.to_vec())?;
    let noisy = masked_noise_batch(&xt, &mt, cfg.sigma, cfg.samples, rng)?;
    let z = params.logits(&noisy)?;
    let mut total = 0.0;
    for k in 0..cfg.samples {
        total += task_loss(z.row(k), y)?;
    }
    Ok(cfg.alpha * total / cfg.samples as f64)
}

/// Masked ℓ∞ PGD on a batch; returns `δ*` of shape `[n, d]`.
///
/// The attack graph is recorded once and replayed for every step. Each
/// example keeps the iterate with the largest loss seen, the start point
/// included.
pub fn pgd_attack_batch<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    m: &Tensor,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = x.dims2()?;
    if m.shape() != x.shape() {
        return Err(Error::shape("pgd_attack", format!("x {:?}, m {:?}", x.shape(), m.shape())));
    }
    let kappa = cfg.kappa;
    let step = cfg.step();
    let project = |delta: &mut [f64], xs: &[f64], ms: &[f64]| {
        for j in 0..delta.len() {
            if ms[j] == 0.0 {
                delta[j] = 0.0;
                continue;
            }
            let mut v = delta[j].clamp(-kappa, kappa);
            if let Some((lo, hi)) = cfg.clamp {
                v = ((xs[j] + v).clamp(lo, hi) - xs[j]).clamp(-kappa, kappa);
            }
            delta[j] = v;
        }
    };

    let mut delta = vec![0.0; n * d];
    if cfg.random_start && kappa > 0.0 {
        for v in delta.iter_mut() {
            *v = rng.random_range(-kappa..=kappa);
        }
        project(&mut delta, x.data(), m.data());
    }

    let mut rec = ComputationRecord::new();
    let pv = params.register(&mut rec, false);
    let xv = rec.input(x.clone());
    let z = forward_logits(&mut rec, &pv, xv)?;
    let per = cross_entropy_per_example(&mut rec, z, labels)?;
    let total = rec.sum(per)?;
    let g = rec.grad(total, &[xv], false)?[0];

    let mut best = delta.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    for t in 0..=cfg.steps {
        let shifted = x.zip_map(&Tensor::matrix(n, d, delta.clone())?, "pgd_attack", |a, b| a + b)?;
        rec.forward(&[(xv, shifted)])?;
        for (i, &l) in rec.value(per).data().iter().enumerate() {
            if l > best_loss[i] {
                best_loss[i] = l;
                best[i * d..(i + 1) * d].copy_from_slice(&delta[i * d..(i + 1) * d]);
            }
        }
        if t == cfg.steps || step == 0.0 || kappa == 0.0 {
            break;
        }
        let grad = rec.value(g).data();
        for ((dv, &gv), &mv) in delta.iter_mut().zip(grad).zip(m.data()) {
            let s = mv * gv;
            if s > 0.0 {
                *dv += step;
            } else if s < 0.0 {
                *dv -= step;
            }
        }
        project(&mut delta, x.data(), m.data());
    }
    Tensor::matrix(n, d, best)
}

/// Masked PGD for one example; returns `δ*`.
pub fn pgd_attack<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    m: &[f64],
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.len() != m.len() {
        return Err(Error::shape("pgd_attack", "x and m lengths differ"));
    }
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    let mt = Tensor::matrix(1, m.len(), m.to_vec())?;
    Ok(pgd_attack_batch(params, &xt, &[y], &mt, cfg, rng)?.into_data())
}

/// `α ℓ(f(x + δ*), y)` with `δ*` from [`pgd_attack`].
pub fn pgd_ex_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    m: &[f64],
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<f64> {
    let delta = pgd_attack(params, x, y, m, cfg, rng)?;
    let adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let z = params.logits(&Tensor::vector(adv))?;
    Ok(cfg.alpha * task_loss(z.data(), y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_3_m2() -> ModelParams {
        ModelParams::linear(&Tensor::from_rows(&[[3.0, -2.0]]).unwrap(), &Tensor::vector(vec![0.0])).unwrap()
    }

    fn pgd_cfg(kappa: f64) -> PerturbConfig {
        PerturbConfig {
            kappa,
            ..PerturbConfig::default()
        }
    }

    #[test]
    fn linear_single_logit_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = pgd_attack(&linear_3_m2(), &[0.2, 0.1], 1, &[1.0, 0.0], &pgd_cfg(0.5), &mut rng).unwrap();
        assert_eq!(d, vec![-0.5, 0.0]);
    }

    #[test]
    fn zero_mask_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = pgd_attack(&linear_3_m2(), &[0.2, 0.1], 1, &[0.0, 0.0], &pgd_cfg(0.5), &mut rng).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn avg_ex_degenerate_cases() {
        let p = linear_3_m2();
        let base = task_loss(p.logits(&Tensor::vector(vec![0.2, 0.1])).unwrap().data(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PerturbConfig {
            method: PerturbMethod::Avg,
            sigma: 0.0,
            alpha: 0.7,
            ..PerturbConfig::default()
        };
        let l = avg_ex_loss(&p, &[0.2, 0.1], 1, &[1.0, 1.0], &cfg, &mut rng).unwrap();
        assert!((l - 0.7 * base).abs() < 1e-14);
        let cfg = PerturbConfig { sigma: 5.0, ..cfg };
        let l = avg_ex_loss(&p, &[0.2, 0.1], 1, &[0.0, 0.0], &cfg, &mut rng).unwrap();
        assert!((l - 0.7 * base).abs() < 1e-14);
    }

    #[test]
    fn kappa_zero_is_nominal() {
        let p = linear_3_m2();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PerturbConfig {
            alpha: 2.0,
            ..pgd_cfg(0.0)
        };
        let l = pgd_ex_loss(&p, &[0.2, 0.1], 0, &[1.0, 1.0], &cfg, &mut rng).unwrap();
        let base = task_loss(p.logits(&Tensor::vector(vec![0.2, 0.1])).unwrap().data(), 0).unwrap();
        assert_eq!(l, 2.0 * base);
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig { steps: 0, ..PerturbConfig::default() }.validate().is_err());
        assert!(PerturbConfig { samples: 0, ..PerturbConfig::default() }.validate().is_err());
        assert!(PerturbConfig { kappa: -1.0, ..PerturbConfig::default() }.validate().is_err());
    }
}
