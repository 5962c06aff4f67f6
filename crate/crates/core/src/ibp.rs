//! Interval bound propagation over ReLU MLPs.
//!
//! A box `[l, u]` is pushed through each affine layer in center/radius
//! form (`c' = W c + b`, `r' = |W| r`) and through ReLU by clamping both
//! ends. The output box contains the logits of every input in the input
//! box.

use crate::autodiff::{ComputationRecord, Var};
use crate::error::{Error, Result};
use crate::model::{class_logits, cross_entropy_per_example, task_loss, ModelParams, ParamVars};
use crate::tensor::Tensor;

/// Elementwise bounds `lower <= upper` on a vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxInterval {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxInterval {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::shape(
                "box",
                format!("lower has {} entries, upper {}", lower.len(), upper.len()),
            ));
        }
        for (index, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(Error::NonFinite { op: "box" });
            }
            if l > u {
                return Err(Error::BoundInversion {
                    index,
                    lower: l,
                    upper: u,
                });
            }
        }
        Ok(BoxInterval { lower, upper })
    }

    pub fn point(x: &[f64]) -> Self {
        BoxInterval {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.len()
            && z
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    /// True when `other` lies inside `self`.
    pub fn encloses(&self, other: &BoxInterval) -> bool {
        self.len() == other.len()
            && (0..self.len())
                .all(|i| self.lower[i] <= other.lower[i] && other.upper[i] <= self.upper[i])
    }
}

/// `[x - κ m, x + κ m]`, optionally clamped to `range`.
pub fn input_box(x: &[f64], m: &[f64], kappa: f64, range: Option<(f64, f64)>) -> Result<BoxInterval> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidArgument(format!("box radius must be >= 0, got {kappa}")));
    }
    if x.len() != m.len() {
        return Err(Error::shape("input_box", format!("x has {} entries, m {}", x.len(), m.len())));
    }
    let mut lower: Vec<f64> = x.iter().zip(m).map(|(x, m)| x - kappa * m).collect();
    let mut upper: Vec<f64> = x.iter().zip(m).map(|(x, m)| x + kappa * m).collect();
    if let Some((lo, hi)) = range {
        for (l, &xi) in lower.iter_mut().zip(x) {
            *l = l.max(lo).min(xi);
        }
        for (u, &xi) in upper.iter_mut().zip(x) {
            *u = u.min(hi).max(xi);
        }
    }
    BoxInterval::new(lower, upper)
}

/// Bounds of `W z + b` over `z` in `bx`, with `W` stored `[out, in]`.
pub fn propagate_affine(weight: &Tensor, bias: &Tensor, bx: &BoxInterval) -> Result<BoxInterval> {
    let (out, inp) = weight.dims2()?;
    if inp != bx.len() || bias.len() != out {
        return Err(Error::shape(
            "propagate_affine",
            format!("W {:?}, b {:?}, box of {}", weight.shape(), bias.shape(), bx.len()),
        ));
    }
    let c: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let r: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| 0.5 * (u - l)).collect();
    let mut lower = Vec::with_capacity(out);
    let mut upper = Vec::with_capacity(out);
    for (row, b) in weight.data().chunks_exact(inp).zip(bias.data()) {
        let cc = row.iter().zip(&c).map(|(w, c)| w * c).sum::<f64>() + b;
        let rr: f64 = row.iter().zip(&r).map(|(w, r)| w.abs() * r).sum();
        lower.push(cc - rr);
        upper.push(cc + rr);
    }
    BoxInterval::new(lower, upper)
}

pub fn propagate_relu(bx: &BoxInterval) -> BoxInterval {
    BoxInterval {
        lower: bx.lower.iter().map(|v| v.max(0.0)).collect(),
        upper: bx.upper.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Logit bounds of `params` over the input box.
pub fn propagate(params: &ModelParams, bx: &BoxInterval) -> Result<BoxInterval> {
    if bx.len() != params.spec().input_dim() {
        return Err(Error::shape(
            "propagate",
            format!("box of {}, model expects {}", bx.len(), params.spec().input_dim()),
        ));
    }
    let layers = params.layers();
    let mut cur = bx.clone();
    for (i, layer) in layers.iter().enumerate() {
        cur = propagate_affine(&layer.weight, &layer.bias, &cur)?;
        if i + 1 < layers.len() {
            cur = propagate_relu(&cur);
        }
    }
    Ok(cur)
}

/// `z̃ = l ⊙ ȳ + u ⊙ (1 - ȳ)`. For a single logit the box bounds the binary
/// logit `f`: label 1 takes `l`, label 0 takes `u`.
pub fn worst_case_logits(bx: &BoxInterval, y: usize) -> Result<Vec<f64>> {
    let c = bx.len();
    if c == 1 {
        return match y {
            0 => Ok(vec![bx.upper[0]]),
            1 => Ok(vec![bx.lower[0]]),
            _ => Err(Error::LabelOutOfRange { label: y, classes: 2 }),
        };
    }
    if y >= c {
        return Err(Error::LabelOutOfRange { label: y, classes: c });
    }
    Ok((0..c).map(|k| if k == y { bx.lower[k] } else { bx.upper[k] }).collect())
}

/// `ℓ(f(x), y) + α ℓ(z̃, y)` with the box `[x - κ m, x + κ m]`.
pub fn ibp_loss(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    m: &[f64],
    kappa: f64,
    alpha: f64,
    range: Option<(f64, f64)>,
) -> Result<f64> {
    let logits = params.logits(&Tensor::vector(x.to_vec()))?;
    let nominal = task_loss(logits.data(), y)?;
    let bx = input_box(x, m, kappa, range)?;
    let z = worst_case_logits(&propagate(params, &bx)?, y)?;
    Ok(nominal + alpha * task_loss(&z, y)?)
}

/// Batched input boxes `[n, d]` as lower and upper matrices.
pub fn input_box_batch(
    x: &Tensor,
    m: &Tensor,
    kappa: f64,
    range: Option<(f64, f64)>,
) -> Result<(Tensor, Tensor)> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidArgument(format!("box radius must be >= 0, got {kappa}")));
    }
    let mut lower = x.zip_map(m, "input_box_batch", |x, m| x - kappa * m)?;
    let mut upper = x.zip_map(m, "input_box_batch", |x, m| x + kappa * m)?;
    if let Some((lo, hi)) = range {
        for (l, &xi) in lower.data_mut().iter_mut().zip(x.data()) {
            *l = l.max(lo).min(xi);
        }
        for (u, &xi) in upper.data_mut().iter_mut().zip(x.data()) {
            *u = u.min(hi).max(xi);
        }
    }
    Ok((lower, upper))
}

/// Records bound propagation of a batch of boxes and returns the recorded
/// worst-case logits (`[n, c]`, or `[n, 1]` for single-logit models).
pub fn record_worst_case_logits(
    rec: &mut ComputationRecord,
    params: &ParamVars,
    lower: Var,
    upper: Var,
    labels: &[usize],
) -> Result<Var> {
    let mut c = rec.add(lower, upper)?;
    c = rec.scale(c, 0.5)?;
    let mut r = rec.sub(upper, lower)?;
    r = rec.scale(r, 0.5)?;
    let last = params.weights.len() - 1;
    let mut bounds = (lower, upper);
    for (i, (&w, &b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let cw = rec.matmul(c, w, false, true)?;
        let c2 = rec.add_bias(cw, b)?;
        let aw = rec.abs(w)?;
        let r2 = rec.matmul(r, aw, false, true)?;
        let mut l = rec.sub(c2, r2)?;
        let mut u = rec.add(c2, r2)?;
        if i < last {
            l = rec.relu(l)?;
            u = rec.relu(u)?;
            let s = rec.add(l, u)?;
            c = rec.scale(s, 0.5)?;
            let d = rec.sub(u, l)?;
            r = rec.scale(d, 0.5)?;
        }
        bounds = (l, u);
    }
    let (l, u) = bounds;
    let (n, classes) = rec.value(l).dims2()?;
    if n != labels.len() {
        return Err(Error::shape("record_worst_case_logits", format!("{n} rows, {} labels", labels.len())));
    }
    let mut pick = vec![0.0; n * classes];
    for (i, &y) in labels.iter().enumerate() {
        if classes == 1 {
            if y > 1 {
                return Err(Error::LabelOutOfRange { label: y, classes: 2 });
            }
            pick[i] = y as f64;
        } else {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            pick[i * classes + y] = 1.0;
        }
    }
    let other: Vec<f64> = pick.iter().map(|p| 1.0 - p).collect();
    let pick = rec.constant(Tensor::matrix(n, classes, pick)?);
    let other = rec.constant(Tensor::matrix(n, classes, other)?);
    let lo = rec.mul(l, pick)?;
    let hi = rec.mul(u, other)?;
    rec.add(lo, hi)
}

/// Recorded per-example worst-case cross-entropy `[n, 1]`.
pub fn record_ibp_robust_loss(
    rec: &mut ComputationRecord,
    params: &ParamVars,
    lower: Var,
    upper: Var,
    labels: &[usize],
) -> Result<Var> {
    let z = record_worst_case_logits(rec, params, lower, upper, labels)?;
    let z = class_logits(rec, z)?;
    cross_entropy_per_example(rec, z, labels)
}
