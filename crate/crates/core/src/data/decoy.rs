//! Decoy-MNIST: each 3×28×28 image holds the digit in one lateral half and
//! a label-coloured block in the other. Inputs are channel-major
//! (`x[c·784 + r·28 + col]`).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{round_f32, DatasetSplits, MaskedExample, RawMnist};
use crate::error::{Error, Result};
use crate::rng::{stream, substream, Stream};

const SIDE: usize = 28;
const HALF: usize = 14;
const CHANNELS: usize = 3;

/// Decoy colour per label; every pair differs by at least 0.4 in some
/// channel and no channel sits at 0 or 1.
pub const DECOY_COLORS: [[f64; 3]; 10] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [0.9, 0.9, 0.9],
    [0.9, 0.5, 0.1],
    [0.5, 0.1, 0.9],
    [0.1, 0.5, 0.9],
];

pub fn decoy_color(label: usize) -> [f64; 3] {
    DECOY_COLORS[label]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoySizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DecoySizes {
    fn default() -> Self {
        DecoySizes {
            train: 10_000,
            val: 1_000,
            test: 2_000,
        }
    }
}

/// Builds train/val from `train_raw` (disjoint subsets) and test from
/// `test_raw`. Training decoys show the true label's colour; validation and
/// test decoys show a uniformly drawn different label's colour.
pub fn build_decoy_mnist(
    train_raw: &RawMnist,
    test_raw: &RawMnist,
    seed: u64,
    sizes: DecoySizes,
) -> Result<DatasetSplits> {
    for raw in [train_raw, test_raw] {
        if raw.rows != SIDE || raw.cols != SIDE {
            return Err(Error::InvalidArgument(format!(
                "expected 28x28 images, got {}x{}",
                raw.rows, raw.cols
            )));
        }
        if let Some(&bad) = raw.labels.iter().find(|&&l| l >= 10) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: 10,
            });
        }
    }
    if sizes.train + sizes.val > train_raw.count {
        return Err(Error::InvalidArgument(format!(
            "requested {} train + {} val examples, only {} available",
            sizes.train, sizes.val, train_raw.count
        )));
    }
    if sizes.test > test_raw.count {
        return Err(Error::InvalidArgument(format!(
            "requested {} test examples, only {} available",
            sizes.test, test_raw.count
        )));
    }
    let mut rng = stream(seed, Stream::Data);
    let mut order: Vec<usize> = (0..train_raw.count).collect();
    order.shuffle(&mut rng);
    let mut test_order: Vec<usize> = (0..test_raw.count).collect();
    test_order.shuffle(&mut rng);

    let make = |raw: &RawMnist, idx: &[usize], split: u64, matching: bool| -> Vec<MaskedExample> {
        idx.iter()
            .enumerate()
            .map(|(i, &src)| {
                let mut r = substream(seed, Stream::Data, (split << 32) | i as u64);
                let y = raw.labels[src] as usize;
                let decoy_left = r.random::<bool>();
                let shown = if matching {
                    y
                } else {
                    (y + 1 + r.random_range(0..9)) % 10
                };
                compose(raw, src, y, shown, decoy_left)
            })
            .collect()
    };
    Ok(DatasetSplits {
        name: "decoy-mnist".into(),
        input_dim: CHANNELS * SIDE * SIDE,
        classes: 10,
        train: make(train_raw, &order[..sizes.train], 1, true),
        val: make(train_raw, &order[sizes.train..sizes.train + sizes.val], 2, false),
        test: make(test_raw, &test_order[..sizes.test], 3, false),
    })
}

fn compose(raw: &RawMnist, src: usize, y: usize, shown: usize, decoy_left: bool) -> MaskedExample {
    let digit = raw.image(src);
    let color = DECOY_COLORS[shown];
    let plane = SIDE * SIDE;
    let mut x = vec![0.0; CHANNELS * plane];
    let mut m = vec![0.0; CHANNELS * plane];
    let (decoy_start, digit_start) = if decoy_left { (0, HALF) } else { (HALF, 0) };
    for c in 0..CHANNELS {
        for r in 0..SIDE {
            let row = c * plane + r * SIDE;
            for j in 0..HALF {
                x[row + decoy_start + j] = color[c];
                m[row + decoy_start + j] = 1.0;
                x[row + digit_start + j] = round_f32(digit[r * SIDE + 2 * j + 1]);
            }
        }
    }
    MaskedExample { x, y, m, group: y }
}
