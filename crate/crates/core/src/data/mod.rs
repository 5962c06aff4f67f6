//! Datasets of `(x, y, m)` triplets.
//!
//! Every builder stores inputs already rounded to `f32`, so a dataset
//! survives a round trip through the cache file unchanged.

mod cache;
mod decoy;
mod idx;
mod toy;

pub use cache::{read_cache, write_cache, CacheMeta};
pub use decoy::{build_decoy_mnist, decoy_color, DecoySizes, DECOY_COLORS};
pub use idx::{load_idx, write_idx, RawMnist};
pub use toy::{gen_toy2d, gen_toy2d_with, ToyLayout, TOY_CLASS0_X1, TOY_STD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An input, its label, its irrelevance mask and its evaluation group.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub x: Vec<f64>,
    pub y: usize,
    /// 1 marks features the model must not rely on.
    pub m: Vec<f64>,
    pub group: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub name: String,
    pub input_dim: usize,
    pub classes: usize,
    pub train: Vec<MaskedExample>,
    pub val: Vec<MaskedExample>,
    pub test: Vec<MaskedExample>,
}

impl DatasetSplits {
    pub fn split(&self, which: SplitName) -> &[MaskedExample] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for (i, e) in split.iter().enumerate() {
                if e.x.len() != self.input_dim || e.m.len() != self.input_dim {
                    return Err(Error::shape("dataset", format!("{name}[{i}] has wrong width")));
                }
                if e.y >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: e.y,
                        classes: self.classes,
                    });
                }
                if e.m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidArgument(format!("{name}[{i}] mask is not binary")));
                }
                if !e.x.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "dataset" });
                }
            }
        }
        Ok(())
    }
}

/// Rows of a split gathered into matrices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub m: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn gather(examples: &[MaskedExample], indices: &[usize]) -> Result<Self> {
        let d = examples
            .first()
            .map(|e| e.x.len())
            .ok_or_else(|| Error::InvalidArgument("empty split".into()))?;
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut m = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        let mut groups = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = examples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("example index {i} out of range")))?;
            x.extend_from_slice(&e.x);
            m.extend_from_slice(&e.m);
            labels.push(e.y);
            groups.push(e.group);
        }
        Ok(Batch {
            x: Tensor::matrix(indices.len(), d, x)?,
            m: Tensor::matrix(indices.len(), d, m)?,
            labels,
            groups,
        })
    }

    pub fn all(examples: &[MaskedExample]) -> Result<Self> {
        let idx: Vec<usize> = (0..examples.len()).collect();
        Batch::gather(examples, &idx)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
