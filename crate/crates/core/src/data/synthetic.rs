//! Deterministic Gaussian-blob fixtures for tests and smoke runs.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, PURPOSE_SYNTHETIC};
use crate::tensor::Tensor;
use rand::Rng;

/// Gaussian clusters, one per class, with unit-separated centroids laid out
/// on coordinate axes. `std_dev` 0 duplicates the centroids exactly; small
/// values keep the classes linearly separable.
pub fn synthetic_blobs(
    num_classes: usize,
    dims: usize,
    per_class: usize,
    std_dev: f32,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || per_class == 0 {
        return Err(Error::Config(
            "synthetic blobs need classes, dims and per_class >= 1".into(),
        ));
    }
    if std_dev < 0.0 {
        return Err(Error::Config(format!("negative std_dev {std_dev}")));
    }
    let n = num_classes * per_class;
    let mut rng = rng::stream(&[seed, PURPOSE_SYNTHETIC, num_classes as u64, dims as u64]);
    let mut features = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = s % num_classes;
        for d in 0..dims {
            let center = if d == class % dims { 1.0 } else { 0.0 };
            // Box-Muller from two uniform draws; drawn even when std_dev is
            // zero so sample values stay aligned across std_dev choices.
            let u1: f32 = rng.random::<f32>().max(f32::MIN_POSITIVE);
            let u2: f32 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
            features.push(center + std_dev * z);
        }
        labels.push(class);
    }
    Dataset::new(Tensor::from_vec(&[n, dims], features)?, labels, num_classes)
}
