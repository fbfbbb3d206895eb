//! Image pairs: synthetic generation, PNG storage and patch tiling.

mod png;
mod synthetic;
mod tiling;

pub use png::{load_label_png, load_rgb_png, read_pair, save_label_png, save_rgb_png, write_pair};
pub use synthetic::{generate_synthetic_pair, SyntheticGenerator};
pub use tiling::{tile_dataset, tiles_along, DatasetSplit, PatchRef};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two co-registered `3×H×W` images in `[0, 1]` and an `H×W` {0,1} label.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangePair {
    pub id: String,
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    pub label: Tensor<f32>,
}

impl ChangePair {
    pub fn new(id: impl Into<String>, t1: Tensor<f32>, t2: Tensor<f32>, label: Tensor<f32>) -> Result<Self> {
        let pair = Self {
            id: id.into(),
            t1,
            t2,
            label,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.t1.shape();
        if s.len() != 3 || s[0] != 3 || self.t2.shape() != s {
            return Err(Error::shape("change pair", s, self.t2.shape()));
        }
        if self.label.shape() != &s[1..] {
            return Err(Error::shape("change pair label", self.label.shape(), &s[1..]));
        }
        if self.label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("label of {} is not binary", self.id)));
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.t1.shape()[1], self.t1.shape()[2])
    }

    pub fn label_bits(&self) -> Vec<u8> {
        self.label.data().iter().map(|&v| u8::from(v > 0.5)).collect()
    }

    pub fn change_fraction(&self) -> f64 {
        self.label.data().iter().filter(|&&v| v > 0.5).count() as f64 / self.label.len() as f64
    }
}
