//! Training objectives and the training loop.
//!
//! Every method shares one batch objective
//!
//! ```text
//! Σ_n [ℓ(f(xₙ), yₙ) + α · robustₙ] + λ R + ½ β s ‖θ‖²
//! ```
//!
//! where `robustₙ` is the masked-noise average, the PGD loss or the IBP
//! worst-case loss, `R = Σ_n ‖IS(xₙ) ⊙ mₙ‖²` is the explanation penalty and
//! `s` is the batch share of the training set, so one epoch applies the
//! decay once. On the full training set this is the dataset-level
//! objective with `s = 1`. IBP methods ramp the box radius up from 0 and `α` down
//! to half its value over the first `ramp_fraction` of training.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ComputationRecord, Var};
use crate::data::{Batch, DatasetSplits, MaskedExample};
use crate::error::{Error, Result};
use crate::ibp::{input_box_batch, record_ibp_robust_loss};
use crate::metrics::{macro_avg_accuracy, worst_group_accuracy};
use crate::model::{cross_entropy_per_example, forward_logits, MlpSpec, ModelParams, ParamVars};
use crate::perturb::{masked_noise_batch, pgd_attack_batch, PerturbConfig, PerturbMethod};
use crate::rng::{stream, substream, Stream};
use crate::tensor::Tensor;

/// Per-coordinate importance scores, same shape as the input.
pub type SaliencyMap = Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "erm")]
    Erm,
    #[serde(rename = "grad-reg")]
    GradReg,
    #[serde(rename = "avg-ex")]
    AvgEx,
    #[serde(rename = "pgd-ex")]
    PgdEx,
    #[serde(rename = "ibp-ex")]
    IbpEx,
    #[serde(rename = "pgd+grad")]
    PgdGrad,
    #[serde(rename = "ibp+grad")]
    IbpGrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Robust {
    Avg,
    Pgd,
    Ibp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Erm,
        Method::GradReg,
        Method::AvgEx,
        Method::PgdEx,
        Method::IbpEx,
        Method::PgdGrad,
        Method::IbpGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::GradReg => "grad-reg",
            Method::AvgEx => "avg-ex",
            Method::PgdEx => "pgd-ex",
            Method::IbpEx => "ibp-ex",
            Method::PgdGrad => "pgd+grad",
            Method::IbpGrad => "ibp+grad",
        }
    }

    pub fn uses_grad_reg(self) -> bool {
        matches!(self, Method::GradReg | Method::PgdGrad | Method::IbpGrad)
    }

    fn robust(self) -> Option<Robust> {
        match self {
            Method::AvgEx => Some(Robust::Avg),
            Method::PgdEx | Method::PgdGrad => Some(Robust::Pgd),
            Method::IbpEx | Method::IbpGrad => Some(Robust::Ibp),
            Method::Erm | Method::GradReg => None,
        }
    }

    pub fn is_ibp(self) -> bool {
        self.robust() == Some(Robust::Ibp)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub method: Method,
    /// Explanation-penalty weight λ.
    pub lambda: f64,
    /// Weight-decay coefficient β.
    pub beta: f64,
    /// Robust-loss weight α.
    pub alpha: f64,
    /// Final box radius: κ for PGD, ε_max for IBP.
    pub epsilon: f64,
    /// Share of training over which IBP ramps ε up and α down.
    pub ramp_fraction: f64,
    /// Avg-Ex noise scale.
    pub sigma: f64,
    /// Avg-Ex samples per example.
    pub samples: usize,
    pub pgd_steps: usize,
    /// Defaults to `epsilon / 4`.
    pub pgd_step_size: Option<f64>,
    pub pgd_random_start: bool,
    /// Clamp perturbed inputs and input boxes to this range.
    pub clamp: Option<(f64, f64)>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub selection: Selection,
    pub seed: u64,
}

/// Which epoch's parameters [`train`] returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Highest validation worst-group accuracy, then highest validation
    /// average accuracy, earliest on full ties.
    #[default]
    #[serde(rename = "best-val-wg")]
    BestValWg,
    #[serde(rename = "last")]
    Last,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            method: Method::Erm,
            lambda: 1.0,
            beta: 0.0,
            alpha: 1.0,
            epsilon: 0.1,
            ramp_fraction: 0.5,
            sigma: 0.3,
            samples: 4,
            pgd_steps: 7,
            pgd_step_size: None,
            pgd_random_start: false,
            clamp: None,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 10,
            selection: Selection::BestValWg,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("training.{msg}")));
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
            ("sigma", self.sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return bad(format!("ramp_fraction must be in (0, 1], got {}", self.ramp_fraction));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.perturb_at(1.0).validate()
    }

    /// ε at training progress `t ∈ [0, 1]`.
    pub fn epsilon_at(&self, t: f64) -> f64 {
        if self.method.is_ibp() {
            self.epsilon * (t / self.ramp_fraction).clamp(0.0, 1.0)
        } else {
            self.epsilon
        }
    }

    /// α at training progress `t ∈ [0, 1]`.
    pub fn alpha_at(&self, t: f64) -> f64 {
        if self.method.is_ibp() {
            self.alpha * (1.0 - 0.5 * (t / self.ramp_fraction).clamp(0.0, 1.0))
        } else {
            self.alpha
        }
    }

    pub fn perturb_at(&self, t: f64) -> PerturbConfig {
        PerturbConfig {
            method: if self.method == Method::AvgEx {
                PerturbMethod::Avg
            } else {
                PerturbMethod::Pgd
            },
            sigma: self.sigma,
            samples: self.samples,
            kappa: self.epsilon_at(t),
            steps: self.pgd_steps,
            step_size: self.pgd_step_size,
            alpha: self.alpha_at(t),
            clamp: self.clamp,
            random_start: self.pgd_random_start,
        }
    }
}

/// Records `IS(x) = ∇ₓ Σ_c log softmax_c(f(x))` for every row of `x`; a
/// single-logit model uses `∇ₓ f` directly.
pub fn record_importance_scores(
    rec: &mut ComputationRecord,
    params: &ParamVars,
    x: Var,
    create_graph: bool,
) -> Result<Var> {
    let z = forward_logits(rec, params, x)?;
    let s = if rec.value(z).dims2()?.1 == 1 {
        rec.sum(z)?
    } else {
        let lp = rec.log_softmax(z)?;
        rec.sum(lp)?
    };
    Ok(rec.grad(s, &[x], create_graph)?[0])
}

/// Importance scores of each row of `x` (`[n, d]` or `[d]`).
pub fn importance_scores(params: &ModelParams, x: &Tensor) -> Result<SaliencyMap> {
    let (n, d) = x.dims2()?;
    let mut rec = ComputationRecord::new();
    let pv = params.register(&mut rec, false);
    let xv = rec.input(x.clone().reshape(vec![n, d])?);
    let g = record_importance_scores(&mut rec, &pv, xv, false)?;
    rec.value(g).clone().reshape(x.shape().to_vec())
}

fn record_grad_reg(rec: &mut ComputationRecord, params: &ParamVars, x: &Tensor, m: &Tensor) -> Result<Var> {
    let xv = rec.input(x.clone());
    let is = record_importance_scores(rec, params, xv, true)?;
    let mv = rec.constant(m.clone());
    let masked = rec.mul(is, mv)?;
    let sq = rec.mul(masked, masked)?;
    rec.sum(sq)
}

/// `R = Σ_n ‖IS(xₙ) ⊙ mₙ‖²` over the batch.
pub fn grad_reg_term(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let is = importance_scores(params, &batch.x)?;
    Ok(is
        .data()
        .iter()
        .zip(batch.m.data())
        .map(|(g, m)| (g * m) * (g * m))
        .sum())
}

/// The objective's parts on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Σ ℓ(f(xₙ), yₙ)
    pub task: f64,
    /// α Σ robustₙ
    pub robust: f64,
    /// λ R
    pub reg: f64,
    /// ½ β s ‖θ‖²
    pub decay: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.task + self.robust + self.reg + self.decay
    }
}

struct Recorded {
    rec: ComputationRecord,
    params: ParamVars,
    total: Var,
    terms: LossTerms,
}

fn sum_scaled(rec: &mut ComputationRecord, per: Var, c: f64) -> Result<Var> {
    let s = rec.sum(per)?;
    rec.scale(s, c)
}

fn record_objective<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainingConfig,
    t: f64,
    decay_share: f64,
    rng: &mut R,
) -> Result<Recorded> {
    let mut rec = ComputationRecord::new();
    let pv = params.register(&mut rec, true);
    let xv = rec.constant(batch.x.clone());
    let z = forward_logits(&mut rec, &pv, xv)?;
    let per = cross_entropy_per_example(&mut rec, z, &batch.labels)?;
    let task = rec.sum(per)?;
    let mut terms = LossTerms {
        task: rec.value(task).item()?,
        ..LossTerms::default()
    };
    let mut total = task;

    let alpha = cfg.alpha_at(t);
    if let Some(kind) = cfg.method.robust() {
        if alpha > 0.0 {
            let pc = cfg.perturb_at(t);
            let robust = match kind {
                Robust::Avg => {
                    let noisy = masked_noise_batch(&batch.x, &batch.m, pc.sigma, pc.samples, rng)?;
                    let labels: Vec<usize> = batch
                        .labels
                        .iter()
                        .flat_map(|&y| std::iter::repeat_n(y, pc.samples))
                        .collect();
                    let nv = rec.constant(noisy);
                    let zn = forward_logits(&mut rec, &pv, nv)?;
                    let per = cross_entropy_per_example(&mut rec, zn, &labels)?;
                    sum_scaled(&mut rec, per, alpha / pc.samples as f64)?
                }
                Robust::Pgd => {
                    let delta = pgd_attack_batch(params, &batch.x, &batch.labels, &batch.m, &pc, rng)?;
                    let adv = batch.x.zip_map(&delta, "pgd", |a, b| a + b)?;
                    let av = rec.constant(adv);
                    let za = forward_logits(&mut rec, &pv, av)?;
                    let per = cross_entropy_per_example(&mut rec, za, &batch.labels)?;
                    sum_scaled(&mut rec, per, alpha)?
                }
                Robust::Ibp => {
                    let (lo, hi) = input_box_batch(&batch.x, &batch.m, pc.kappa, cfg.clamp)?;
                    let lv = rec.constant(lo);
                    let uv = rec.constant(hi);
                    let per = record_ibp_robust_loss(&mut rec, &pv, lv, uv, &batch.labels)?;
                    sum_scaled(&mut rec, per, alpha)?
                }
            };
            terms.robust = rec.value(robust).item()?;
            total = rec.add(total, robust)?;
        }
    }

    if cfg.method.uses_grad_reg() && cfg.lambda > 0.0 {
        let r = record_grad_reg(&mut rec, &pv, &batch.x, &batch.m)?;
        let r = rec.scale(r, cfg.lambda)?;
        terms.reg = rec.value(r).item()?;
        total = rec.add(total, r)?;
    }

    terms.decay = 0.5 * cfg.beta * decay_share * params.sq_norm();
    Ok(Recorded {
        rec,
        params: pv,
        total,
        terms,
    })
}

/// The full objective on `batch` at training progress `step_fraction`,
/// with the whole decay term `½ β ‖θ‖²`.
pub fn total_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainingConfig,
    step_fraction: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(loss_terms(params, batch, cfg, step_fraction, rng)?.total())
}

pub fn loss_terms<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainingConfig,
    step_fraction: f64,
    rng: &mut R,
) -> Result<LossTerms> {
    Ok(record_objective(params, batch, cfg, step_fraction, 1.0, rng)?.terms)
}

/// Objective terms and the gradient of their sum, one tensor per parameter
/// in [`ModelParams::tensors`] order. `decay_share` scales the decay term.
pub fn total_loss_grad<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainingConfig,
    step_fraction: f64,
    decay_share: f64,
    rng: &mut R,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let mut r = record_objective(params, batch, cfg, step_fraction, decay_share, rng)?;
    let wrt = r.params.all();
    let grads = r.rec.grad(r.total, &wrt, false)?;
    let coef = cfg.beta * decay_share;
    let out = grads
        .iter()
        .zip(params.tensors())
        .map(|(&g, p)| {
            let g = r.rec.value(g);
            if coef > 0.0 {
                g.zip_map(p, "decay", |g, p| g + coef * p)
            } else {
                Ok(g.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((r.terms, out))
}

/// Adam with the usual moment decay rates.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example task loss.
    pub train_loss: f64,
    /// Mean per-example weighted robust loss.
    pub robust_loss: f64,
    /// Mean per-example weighted explanation penalty.
    pub reg_loss: f64,
    pub val_avg_acc: f64,
    pub val_wg_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
}

/// Accuracy summary used for model selection.
pub fn split_accuracies(params: &ModelParams, examples: &[MaskedExample]) -> Result<(f64, f64)> {
    let preds = predict_all(params, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.y).collect();
    let groups: Vec<usize> = examples.iter().map(|e| e.group).collect();
    Ok((
        macro_avg_accuracy(&preds, &labels)?,
        worst_group_accuracy(&preds, &labels, &groups)?,
    ))
}

/// Predictions in chunks of 512 rows.
pub fn predict_all(params: &ModelParams, examples: &[MaskedExample]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(512) {
        let b = Batch::gather(examples, chunk)?;
        preds.extend(params.predict(&b.x)?);
    }
    Ok(preds)
}

pub fn train(data: &DatasetSplits, spec: &MlpSpec, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    train_with_observer(data, spec, cfg, |_| {})
}

/// Trains and returns the epoch chosen by `cfg.selection`. `observe` sees
/// every epoch record.
pub fn train_with_observer(
    data: &DatasetSplits,
    spec: &MlpSpec,
    cfg: &TrainingConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument("train and val splits must be non-empty".into()));
    }
    if spec.input_dim() != data.input_dim {
        return Err(Error::Config(format!(
            "model input width {} does not match dataset width {}",
            spec.input_dim(),
            data.input_dim
        )));
    }
    let mut params = ModelParams::init(spec, &mut stream(cfg.seed, Stream::Init))?;
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let robust_stream = if cfg.method == Method::AvgEx {
        Stream::Noise
    } else {
        Stream::Pgd
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, ModelParams)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut global = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut sums = LossTerms::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::gather(&data.train, chunk)?;
            let t = global as f64 / total_steps as f64;
            let mut rng = substream(cfg.seed, robust_stream, global as u64);
            let (terms, grads) = match total_loss_grad(&params, &batch, cfg, t, chunk.len() as f64 / n as f64, &mut rng) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !terms.total().is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: terms.total(),
                });
            }
            opt.update(&mut params, &grads);
            sums.task += terms.task;
            sums.robust += terms.robust;
            sums.reg += terms.reg;
            global += 1;
        }
        let (val_avg_acc, val_wg_acc) = split_accuracies(&params, &data.val)?;
        let record = EpochRecord {
            epoch,
            train_loss: sums.task / n as f64,
            robust_loss: sums.robust / n as f64,
            reg_loss: sums.reg / n as f64,
            val_avg_acc,
            val_wg_acc,
        };
        observe(&record);
        let better = match cfg.selection {
            Selection::BestValWg => best
                .as_ref()
                .is_none_or(|(key, _, _)| (val_wg_acc, val_avg_acc) > *key),
            Selection::Last => true,
        };
        if better {
            best = Some(((val_wg_acc, val_avg_acc), epoch, params.clone()));
        }
        history.push(record);
    }
    let (best_params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, 0),
    };
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
    })
}

/// History as CSV, preceded by a `#` metadata line.
pub fn history_csv(history: &[EpochRecord], header: &str) -> String {
    let mut s = String::new();
    if !header.is_empty() {
        let _ = writeln!(s, "# {header}");
    }
    s.push_str("epoch,train_loss,robust_loss,reg_loss,val_avg_acc,val_wg_acc\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.robust_loss, r.reg_loss, r.val_avg_acc, r.val_wg_acc
        );
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord], header: &str) -> Result<()> {
    std::fs::write(path, history_csv(history, header)).map_err(|e| Error::io(path, e))
}
