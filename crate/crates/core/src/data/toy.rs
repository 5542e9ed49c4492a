//! Synthetic image classification task: each class is a prototype image made
//! of a few Gaussian blobs; samples are the prototype plus pixel noise,
//! clamped to `[0, 1]`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Samples per class; length must equal `n_classes`.
    pub per_class: Vec<usize>,
    /// Standard deviation of the additive pixel noise.
    pub sigma: f64,
    pub blobs: usize,
    /// Seed for the class prototypes. Train and test sets built from the same
    /// `prototype_seed` share prototypes.
    pub prototype_seed: u64,
    /// Seed for sample noise and ordering.
    pub sample_seed: u64,
}

impl ToySpec {
    pub fn balanced(n_classes: usize, side: usize, per_class: usize, sigma: f64, seed: u64) -> Self {
        Self {
            n_classes,
            channels: 1,
            height: side,
            width: side,
            per_class: vec![per_class; n_classes],
            sigma,
            blobs: 2,
            prototype_seed: seed,
            sample_seed: seed.wrapping_add(1),
        }
    }
}

/// One `[C x H x W]` prototype per class.
pub fn prototypes(spec: &ToySpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    (0..spec.n_classes)
        .map(|_| {
            let mut img = vec![0.0; spec.channels * spec.height * spec.width];
            for c in 0..spec.channels {
                for _ in 0..spec.blobs {
                    let cy = rng.random_range(0.0..h);
                    let cx = rng.random_range(0.0..w);
                    let s = rng.random_range(0.1..0.25) * h.max(w);
                    let a = rng.random_range(0.6..1.0);
                    for i in 0..spec.height {
                        for j in 0..spec.width {
                            let d2 = (i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2);
                            img[(c * spec.height + i) * spec.width + j] += a * (-d2 / (2.0 * s * s)).exp();
                        }
                    }
                }
            }
            img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            img
        })
        .collect()
}

pub fn make_toy_task(spec: &ToySpec) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Input("toy task dimensions must be positive".into()));
    }
    if spec.per_class.len() != spec.n_classes {
        return Err(Error::Input(format!(
            "per_class has {} entries for {} classes",
            spec.per_class.len(),
            spec.n_classes
        )));
    }
    if !(spec.sigma >= 0.0) {
        return Err(Error::Input("sigma must be non-negative".into()));
    }
    let protos = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
    let mut labels = Vec::new();
    let mut data = Vec::new();
    // classes interleaved so prefixes of the dataset stay roughly balanced
    let mut remaining = spec.per_class.clone();
    while remaining.iter().any(|&r| r > 0) {
        for (k, r) in remaining.iter_mut().enumerate() {
            if *r == 0 {
                continue;
            }
            *r -= 1;
            labels.push(k);
            data.extend(protos[k].iter().map(|&p| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (p + spec.sigma * noise).clamp(0.0, 1.0)
            }));
        }
    }
    if labels.is_empty() {
        return Err(Error::Input("toy task with zero samples".into()));
    }
    let images = Tensor::new(vec![labels.len(), spec.channels, spec.height, spec.width], data)?;
    Dataset::new(images, labels, spec.n_classes)
}
