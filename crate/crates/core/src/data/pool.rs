//! Unlabeled images used to initialize impression synthesis.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Random,
    File,
    /// Images set aside from the training data before partitioning.
    Holdout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPool {
    /// `[M x C x H x W]`
    pub images: Tensor,
    pub provenance: Provenance,
}

impl SeedPool {
    /// I.i.d. uniform `[0, 1)` pixels.
    pub fn random(shape: [usize; 3], count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Input("seed pool needs at least one image".into()));
        }
        let [c, h, w] = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..count * c * h * w).map(|_| rng.random::<f64>()).collect();
        Ok(Self {
            images: Tensor::new(vec![count, c, h, w], data)?,
            provenance: Provenance::Random,
        })
    }

    /// First `count` images of a FIDB file; labels are dropped.
    pub fn from_file(path: impl AsRef<Path>, count: usize) -> Result<Self> {
        let ds = load_dataset(path)?;
        Self::take(&ds, count, Provenance::File)
    }

    pub fn from_dataset(ds: &Dataset, count: usize) -> Result<Self> {
        Self::take(ds, count, Provenance::Holdout)
    }

    fn take(ds: &Dataset, count: usize, provenance: Provenance) -> Result<Self> {
        if ds.len() < count {
            return Err(Error::Input(format!(
                "seed pool has {} images, {count} requested",
                ds.len()
            )));
        }
        let idx: Vec<usize> = (0..count).collect();
        Ok(Self {
            images: ds.images.select_rows(&idx),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
