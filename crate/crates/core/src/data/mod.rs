//! Datasets, FIDB files, label-skew partitioning, toy tasks and seed pools.

pub mod fidb;
pub mod partition;
pub mod pool;
pub mod toy;

pub use fidb::{load_dataset, save_dataset};
pub use partition::{dirichlet_partition, holdout_split, partition_indices, ShardSet};
pub use pool::{Provenance, SeedPool};
pub use toy::{make_toy_task, ToySpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images `[N x C x H x W]` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Validation(format!(
                "images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        if labels.len() != images.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} images",
                labels.len(),
                images.rows()
            )));
        }
        if n_classes == 0 {
            return Err(Error::Validation("dataset needs at least one class".into()));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::Validation(format!(
                "label {y} at sample {i} out of range for {n_classes} classes"
            )));
        }
        if let Some(p) = images.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.images.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Per-image shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.dims();
        [c, h, w]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Input("empty subset".into()));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Input(format!("index {i} out of range for {} samples", self.len())));
        }
        Ok(Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
