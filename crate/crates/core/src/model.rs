//! Feedforward ReLU classifiers.
//!
//! Weights are stored `[out, in]`; a layer computes `x Wᵀ + b` on a batch
//! `x` of shape `[n, in]`. A model with a single output unit is a binary
//! classifier whose logit `f` is lifted to the two-class logits `[0, f]`
//! for the task loss.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian.
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `MLXM` |
//! | 4 | format version `u32` (= 1) |
//! | 8 | config hash `u64` |
//! | 8 | seed `u64` |
//! | 4 | number of widths `L + 1` as `u32` |
//! | 4·(L+1) | widths `u32`: input, hidden…, output |
//! | … | per layer: `W` row-major `[out, in]` as `f64`, then `b` `[out]` as `f64` |

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ComputationRecord, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLXM";
const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths `[input, hidden…, classes]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let spec = MlpSpec { widths };
        spec.validate()?;
        Ok(spec)
    }

    /// 3×28×28 inputs, two 512-wide hidden layers, 10 classes.
    pub fn decoy_mnist() -> Self {
        MlpSpec {
            widths: vec![3 * 28 * 28, 512, 512, 10],
        }
    }

    pub fn toy2d() -> Self {
        MlpSpec {
            widths: vec![2, 32, 32, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least one hidden layer".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "zero-width layer in {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Parameters registered as leaves of a [`ComputationRecord`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl ParamVars {
    /// Weight and bias vars interleaved in layer order, matching
    /// [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

impl ModelParams {
    /// He-scaled Gaussian weights (variance `2 / fan_in`) and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, data).expect("sized"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(ModelParams {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.widths.len() - 1 {
            return Err(Error::shape("from_layers", "layer count does not match spec"));
        }
        for (l, w) in layers.iter().zip(spec.widths.windows(2)) {
            if l.weight.shape() != [w[1], w[0]] || l.bias.shape() != [w[1]] {
                return Err(Error::shape(
                    "from_layers",
                    format!(
                        "expected W [{}, {}] and b [{}], got {:?} and {:?}",
                        w[1],
                        w[0],
                        w[1],
                        l.weight.shape(),
                        l.bias.shape()
                    ),
                ));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite { op: "from_layers" });
            }
        }
        Ok(ModelParams { spec, layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(vec![w[1], w[0]]),
                bias: Tensor::zeros(vec![w[1]]),
            })
            .collect();
        Ok(ModelParams {
            spec: spec.clone(),
            layers,
        })
    }

    /// An MLP computing exactly `W x + b` (`W` is `[c, d]`): the hidden
    /// layer holds `relu(x)` and `relu(-x)`, recombined by the output layer.
    pub fn linear(weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let (c, d) = weight.dims2()?;
        let mut w1 = vec![0.0; 2 * d * d];
        for i in 0..d {
            w1[i * d + i] = 1.0;
            w1[(d + i) * d + i] = -1.0;
        }
        let mut w2 = vec![0.0; c * 2 * d];
        for k in 0..c {
            for i in 0..d {
                let w = weight.data()[k * d + i];
                w2[k * 2 * d + i] = w;
                w2[k * 2 * d + d + i] = -w;
            }
        }
        ModelParams::from_layers(
            MlpSpec::new(d, &[2 * d], c)?,
            vec![
                Layer {
                    weight: Tensor::matrix(2 * d, d, w1)?,
                    bias: Tensor::zeros(vec![2 * d]),
                },
                Layer {
                    weight: Tensor::matrix(c, 2 * d, w2)?,
                    bias: bias.clone(),
                },
            ],
        )
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Weight and bias tensors interleaved in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds the parameters to `rec`, as differentiable leaves if
    /// `trainable`, as constants otherwise.
    pub fn register(&self, rec: &mut ComputationRecord, trainable: bool) -> ParamVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if trainable {
                weights.push(rec.input(l.weight.clone()));
                biases.push(rec.input(l.bias.clone()));
            } else {
                weights.push(rec.constant(l.weight.clone()));
                biases.push(rec.constant(l.bias.clone()));
            }
        }
        ParamVars { weights, biases }
    }

    /// Class logits `[n, c]` for a batch `[n, d]`, evaluated directly.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.spec.input_dim() {
            return Err(Error::shape(
                "logits",
                format!("input width {d}, model expects {}", self.spec.input_dim()),
            ));
        }
        let mut h = if x.shape().len() == 2 {
            x.clone()
        } else {
            x.clone().reshape(vec![1, d])?
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Tensor::matmul(&h, &l.weight, false, true)?;
            let width = l.bias.len();
            for row in z.data_mut().chunks_mut(width) {
                for (v, b) in row.iter_mut().zip(l.bias.data()) {
                    *v += b;
                }
            }
            if i < last {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        if !h.all_finite() {
            return Err(Error::NonFinite { op: "logits" });
        }
        Ok(h)
    }

    /// Predicted class per row. Single-logit models predict `1` when the
    /// logit is positive.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        let (n, c) = z.dims2()?;
        Ok((0..n)
            .map(|i| {
                let row = &z.data()[i * c..(i + 1) * c];
                if c == 1 {
                    usize::from(row[0] > 0.0)
                } else {
                    argmax(row)
                }
            })
            .collect())
    }

    pub fn save(&self, path: &Path, config_hash: u64, seed: u64) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&config_hash.to_le_bytes());
        buf.extend_from_slice(&seed.to_le_bytes());
        buf.extend_from_slice(&(self.spec.widths.len() as u32).to_le_bytes());
        for &w in &self.spec.widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; returns the parameters with the stored config
    /// hash and seed.
    pub fn load(path: &Path) -> Result<(Self, u64, u64)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = ByteCursor::new(&bytes, path);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let hash = cur.u64()?;
        let seed = cur.u64()?;
        let n = cur.u32()? as usize;
        let widths = (0..n).map(|_| cur.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec { widths };
        spec.validate()?;
        let mut layers = Vec::new();
        for w in spec.widths.windows(2) {
            let weight = Tensor::matrix(w[1], w[0], cur.f64s(w[0] * w[1])?)?;
            let bias = Tensor::vector(cur.f64s(w[1])?);
            layers.push(Layer { weight, bias });
        }
        if !cur.is_empty() {
            return Err(Error::format(path, "trailing bytes after parameters"));
        }
        Ok((ModelParams::from_layers(spec, layers)?, hash, seed))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Records the forward pass of `params` on the batch `x` (`[n, d]`).
pub fn forward_logits(rec: &mut ComputationRecord, params: &ParamVars, x: Var) -> Result<Var> {
    let mut h = x;
    let last = params.weights.len() - 1;
    for (i, (&w, &b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let z = rec.matmul(h, w, false, true)?;
        let z = rec.add_bias(z, b)?;
        h = if i < last { rec.relu(z)? } else { z };
    }
    Ok(h)
}

/// Turns single-logit outputs `[n, 1]` into two-class logits `[0, f]`;
/// multi-class logits pass through.
pub fn class_logits(rec: &mut ComputationRecord, logits: Var) -> Result<Var> {
    if rec.value(logits).dims2()?.1 == 1 {
        let lift = rec.constant(Tensor::from_rows(&[[0.0, 1.0]])?);
        rec.matmul(logits, lift, false, false)
    } else {
        Ok(logits)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Per-example softmax cross-entropy `[n, 1]` of recorded logits.
pub fn cross_entropy_per_example(
    rec: &mut ComputationRecord,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let z = class_logits(rec, logits)?;
    let (n, c) = rec.value(z).dims2()?;
    if n != labels.len() {
        return Err(Error::shape("cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    let onehot = rec.constant(one_hot(labels, c)?);
    let lp = rec.log_softmax(z)?;
    let picked = rec.mul(lp, onehot)?;
    let rows = rec.row_sum(picked)?;
    rec.scale(rows, -1.0)
}

/// Summed softmax cross-entropy of recorded logits.
pub fn cross_entropy_sum(rec: &mut ComputationRecord, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = cross_entropy_per_example(rec, logits, labels)?;
    rec.sum(per)
}

/// `-log softmax_y(logits)` for one example. A single logit is read as the
/// binary logit `[0, f]`.
pub fn task_loss(logits: &[f64], y: usize) -> Result<f64> {
    let lifted;
    let z: &[f64] = if logits.len() == 1 {
        lifted = [0.0, logits[0]];
        &lifted
    } else {
        logits
    };
    if y >= z.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: z.len(),
        });
    }
    let top = argmax(z);
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, v)| (v - z[top]).exp())
        .sum();
    Ok((z[top] - z[y]) + rest.ln_1p())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteCursor { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
