use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{round_f32, DatasetSplits, MaskedExample};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// `x₁` centres of the two class-0 clusters are `±TOY_CLASS0_X1`; class 1
/// sits at `x₁ = 0`.
pub const TOY_CLASS0_X1: f64 = 2.0;
pub const TOY_STD: f64 = 0.4;

/// `x₂` centres per cluster. The default puts class 0 below class 1, so a
/// boundary curved in `x₂` also separates the training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyLayout {
    pub class0_left_x2: f64,
    pub class0_right_x2: f64,
    pub class1_x2: f64,
}

impl Default for ToyLayout {
    fn default() -> Self {
        ToyLayout {
            class0_left_x2: -1.5,
            class0_right_x2: -1.5,
            class1_x2: 1.5,
        }
    }
}

/// Two-class 2-D data whose label depends on `x₁` alone; `x₂` is the
/// nuisance coordinate (`m = [0, 1]`). `n` training examples, `n / 4`
/// each for validation and test.
pub fn gen_toy2d(n: usize, seed: u64) -> Result<DatasetSplits> {
    gen_toy2d_with(n, seed, ToyLayout::default())
}

pub fn gen_toy2d_with(n: usize, seed: u64, layout: ToyLayout) -> Result<DatasetSplits> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("toy-2d needs n >= 100, got {n}")));
    }
    let held = n / 4;
    Ok(DatasetSplits {
        name: "toy2d".into(),
        input_dim: 2,
        classes: 2,
        train: toy_split(n, seed, 0, &layout),
        val: toy_split(held, seed, 1, &layout),
        test: toy_split(held, seed, 2, &layout),
    })
}

fn toy_split(n: usize, seed: u64, split: u64, layout: &ToyLayout) -> Vec<MaskedExample> {
    let mut rng = substream(seed, Stream::Data, split);
    let noise = Normal::new(0.0, TOY_STD).expect("positive std");
    (0..n)
        .map(|i| {
            let y = i % 2;
            let (c1, c2) = if y == 1 {
                (0.0, layout.class1_x2)
            } else if rng.random::<bool>() {
                (TOY_CLASS0_X1, layout.class0_right_x2)
            } else {
                (-TOY_CLASS0_X1, layout.class0_left_x2)
            };
            let x1 = round_f32(c1 + noise.sample(&mut rng));
            let x2 = round_f32(c2 + noise.sample(&mut rng));
            MaskedExample {
                x: vec![x1, x2],
                y,
                m: vec![0.0, 1.0],
                group: y,
            }
        })
        .collect()
}
