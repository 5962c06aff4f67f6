//! Evaluation: macro and worst-group accuracy, relative core sensitivity,
//! saliency statistics, SmoothGrad and decision-boundary grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, MaskedExample};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::train::{importance_scores, predict_all, SaliencyMap};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape("metrics", format!("{a} predictions, {b} labels")));
    }
    if a == 0 {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    Ok(())
}

/// Accuracy within each key; keys with no examples do not appear.
fn keyed_accuracy(preds: &[usize], labels: &[usize], keys: &[usize]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((&p, &y), &k) in preds.iter().zip(labels).zip(keys) {
        let e = counts.entry(k).or_default();
        e.0 += usize::from(p == y);
        e.1 += 1;
    }
    counts
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let c = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(c as f64 / preds.len() as f64)
}

/// Mean over classes present in `labels` of the per-class accuracy.
pub fn macro_avg_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let per = keyed_accuracy(preds, labels, labels);
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

pub fn per_group_accuracy(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_lengths(preds.len(), labels.len())?;
    check_lengths(groups.len(), labels.len())?;
    Ok(keyed_accuracy(preds, labels, groups))
}

/// Minimum over non-empty groups of the within-group accuracy.
pub fn worst_group_accuracy(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<f64> {
    Ok(per_group_accuracy(preds, labels, groups)?
        .values()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

/// `100 (acc_c - acc_s) / (2 min(ā, 1 - ā))` with `ā = (acc_c + acc_s) / 2`.
pub fn rcs_from_accuracies(acc_core_noise: f64, acc_spurious_noise: f64) -> Result<f64> {
    let mean = 0.5 * (acc_core_noise + acc_spurious_noise);
    let denom = 2.0 * mean.min(1.0 - mean);
    if !(denom > 0.0) {
        return Err(Error::Undefined(format!(
            "RCS with mean noisy accuracy {mean}"
        )));
    }
    Ok(100.0 * (acc_core_noise - acc_spurious_noise) / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcsResult {
    /// Accuracy with noise on the masked (irrelevant) features.
    pub acc_c: f64,
    /// Accuracy with noise on the unmasked features.
    pub acc_s: f64,
    /// `None` when both accuracies make the ratio undefined.
    pub rcs: Option<f64>,
}

/// Relative core sensitivity with one noise draw `z ~ N(0, σ² I)` per
/// example shared by both passes.
pub fn rcs<R: Rng + ?Sized>(params: &ModelParams, examples: &[MaskedExample], sigma: f64, rng: &mut R) -> Result<RcsResult> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("RCS noise scale must be > 0, got {sigma}")));
    }
    if examples.is_empty() {
        return Err(Error::Undefined("RCS of an empty set".into()));
    }
    let d = examples[0].x.len();
    let mut core_hits = 0usize;
    let mut spur_hits = 0usize;
    for chunk in examples.chunks(256) {
        let mut xc = Vec::with_capacity(chunk.len() * d);
        let mut xs = Vec::with_capacity(chunk.len() * d);
        for e in chunk {
            for j in 0..d {
                let z: f64 = sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                xc.push(e.x[j] + z * e.m[j]);
                xs.push(e.x[j] + z * (1.0 - e.m[j]));
            }
        }
        let pc = params.predict(&Tensor::matrix(chunk.len(), d, xc)?)?;
        let ps = params.predict(&Tensor::matrix(chunk.len(), d, xs)?)?;
        for (e, (a, b)) in chunk.iter().zip(pc.iter().zip(&ps)) {
            core_hits += usize::from(*a == e.y);
            spur_hits += usize::from(*b == e.y);
        }
    }
    let n = examples.len() as f64;
    let acc_c = core_hits as f64 / n;
    let acc_s = spur_hits as f64 / n;
    Ok(RcsResult {
        acc_c,
        acc_s,
        rcs: rcs_from_accuracies(acc_c, acc_s).ok(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyStats {
    /// Median of `‖m ⊙ IS‖`.
    pub s1: f64,
    /// Median of `‖m ⊙ IS‖ / ‖(1 - m) ⊙ IS‖` over examples with a nonzero
    /// denominator; `None` if there are none.
    pub s2: Option<f64>,
    /// Examples left out of `s2`.
    pub zero_denominators: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

pub fn saliency_stats(params: &ModelParams, examples: &[MaskedExample]) -> Result<SaliencyStats> {
    if examples.is_empty() {
        return Err(Error::Undefined("saliency statistics of an empty set".into()));
    }
    let mut on = Vec::with_capacity(examples.len());
    let mut ratio = Vec::with_capacity(examples.len());
    let mut zero = 0usize;
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(256) {
        let b = Batch::gather(examples, chunk)?;
        let is = importance_scores(params, &b.x)?;
        for i in 0..chunk.len() {
            let (g, m) = (is.row(i), b.m.row(i));
            let (mut a, mut c) = (0.0, 0.0);
            for (g, m) in g.iter().zip(m) {
                a += (g * m).powi(2);
                c += (g * (1.0 - m)).powi(2);
            }
            let (a, c) = (a.sqrt(), c.sqrt());
            on.push(a);
            if c > 0.0 {
                ratio.push(a / c);
            } else {
                zero += 1;
            }
        }
    }
    Ok(SaliencyStats {
        s1: median(on).expect("non-empty"),
        s2: median(ratio),
        zero_denominators: zero,
    })
}

/// Mean importance scores over `k` copies of `x` with `N(0, σ² I)` noise.
pub fn smoothgrad<R: Rng + ?Sized>(params: &ModelParams, x: &[f64], k: usize, sigma: f64, rng: &mut R) -> Result<SaliencyMap> {
    if k == 0 {
        return Err(Error::InvalidArgument("SmoothGrad needs at least one sample".into()));
    }
    let d = x.len();
    let mut noisy = Vec::with_capacity(k * d);
    for _ in 0..k {
        for &v in x {
            let e: f64 = StandardNormal.sample(rng);
            noisy.push(v + sigma * e);
        }
    }
    let is = importance_scores(params, &Tensor::matrix(k, d, noisy)?)?;
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, g) in mean.iter_mut().zip(is.row(i)) {
            *m += g;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    Ok(Tensor::vector(mean))
}

/// Predictions and logits on a regular 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryGrid {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// `preds[i][j]` at `(x1[i], x2[j])`.
    pub preds: Vec<Vec<usize>>,
    /// Two-class logits at each point (single-logit models read as `[0, f]`).
    pub logits: Vec<Vec<[f64; 2]>>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn boundary_grid(params: &ModelParams, x1_range: (f64, f64), x2_range: (f64, f64), resolution: usize) -> Result<BoundaryGrid> {
    if params.spec().input_dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "boundary grid needs a 2-D model, input width is {}",
            params.spec().input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be >= 1".into()));
    }
    let x1 = linspace(x1_range.0, x1_range.1, resolution);
    let x2 = linspace(x2_range.0, x2_range.1, resolution);
    let mut pts = Vec::with_capacity(2 * resolution * resolution);
    for &a in &x1 {
        for &b in &x2 {
            pts.extend_from_slice(&[a, b]);
        }
    }
    let z = params.logits(&Tensor::matrix(resolution * resolution, 2, pts)?)?;
    let (_, c) = z.dims2()?;
    let mut preds = Vec::with_capacity(resolution);
    let mut logits = Vec::with_capacity(resolution);
    for i in 0..resolution {
        let mut pr = Vec::with_capacity(resolution);
        let mut lr = Vec::with_capacity(resolution);
        for j in 0..resolution {
            let row = z.row(i * resolution + j);
            let pair = if c == 1 { [0.0, row[0]] } else { [row[0], row[1]] };
            pr.push(if c == 1 {
                usize::from(row[0] > 0.0)
            } else {
                crate::model::argmax(row)
            });
            lr.push(pair);
        }
        preds.push(pr);
        logits.push(lr);
    }
    Ok(BoundaryGrid { x1, x2, preds, logits })
}

impl BoundaryGrid {
    /// Share of fixed-`x₁` columns whose predicted label changes with `x₂`.
    pub fn flip_fraction(&self) -> f64 {
        flip_fraction(&self.preds)
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut s = String::new();
        if !header.is_empty() {
            let _ = writeln!(s, "# {header}");
        }
        s.push_str("x1,x2,pred,logit0,logit1\n");
        for (i, &a) in self.x1.iter().enumerate() {
            for (j, &b) in self.x2.iter().enumerate() {
                let [l0, l1] = self.logits[i][j];
                let _ = writeln!(s, "{a},{b},{},{l0},{l1}", self.preds[i][j]);
            }
        }
        s
    }
}

/// `columns[i]` holds the labels along `x₂` at the `i`-th `x₁`.
pub fn flip_fraction(columns: &[Vec<usize>]) -> f64 {
    if columns.is_empty() {
        return 0.0;
    }
    let flipped = columns
        .iter()
        .filter(|col| col.windows(2).any(|w| w[0] != w[1]))
        .count();
    flipped as f64 / columns.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_acc: f64,
    pub per_group_acc: BTreeMap<String, f64>,
    pub wg_acc: f64,
    pub rcs: Option<f64>,
    pub rcs_acc_c: Option<f64>,
    pub rcs_acc_s: Option<f64>,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub s2_zero_denominators: Option<usize>,
    pub examples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Noise scale for RCS; `None` skips RCS.
    pub rcs_sigma: Option<f64>,
    pub saliency: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            rcs_sigma: Some(0.25),
            saliency: true,
        }
    }
}

pub fn evaluate<R: Rng + ?Sized>(
    params: &ModelParams,
    examples: &[MaskedExample],
    opts: EvalOptions,
    rng: &mut R,
) -> Result<MetricsReport> {
    let preds = predict_all(params, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.y).collect();
    let groups: Vec<usize> = examples.iter().map(|e| e.group).collect();
    let per = per_group_accuracy(&preds, &labels, &groups)?;
    let wg_acc = per.values().copied().fold(f64::INFINITY, f64::min);
    let mut report = MetricsReport {
        avg_acc: macro_avg_accuracy(&preds, &labels)?,
        per_group_acc: per.into_iter().map(|(g, a)| (g.to_string(), a)).collect(),
        wg_acc,
        rcs: None,
        rcs_acc_c: None,
        rcs_acc_s: None,
        s1: None,
        s2: None,
        s2_zero_denominators: None,
        examples: examples.len(),
    };
    if let Some(sigma) = opts.rcs_sigma {
        let r = rcs(params, examples, sigma, rng)?;
        report.rcs = r.rcs;
        report.rcs_acc_c = Some(r.acc_c);
        report.rcs_acc_s = Some(r.acc_s);
    }
    if opts.saliency {
        let s = saliency_stats(params, examples)?;
        report.s1 = Some(s.s1);
        report.s2 = s.s2;
        report.s2_zero_denominators = Some(s.zero_denominators);
    }
    Ok(report)
}
