//! Dataset ingestion and non-IID client partitioning.

pub mod dirichlet;
pub mod har;
pub mod idx;
pub mod synthetic;

pub use dirichlet::dirichlet_partition;
pub use har::load_har;
pub use idx::load_idx;
pub use synthetic::synthetic_blobs;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature matrix (N x input dims) with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = *features
            .shape()
            .first()
            .ok_or_else(|| Error::Input("features need a leading sample dim".into()))?;
        if n == 0 {
            return Err(Error::Input("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Input(format!(
                "{} labels for {} samples",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        features.ensure_finite("dataset features")?;
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1..].iter().product()
    }

    /// Copies the first `n` samples into a new dataset.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let dim = self.feature_dim();
        let mut shape = self.features.shape().to_vec();
        shape[0] = n;
        let features = Tensor::from_vec(&shape, self.features.data()[..n * dim].to_vec())?;
        Dataset::new(features, self.labels[..n].to_vec(), self.num_classes)
    }
}

/// Per-client train/test index lists over one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.train.len()
    }

    /// Client ids with no training samples (permitted, but reported).
    pub fn empty_clients(&self) -> Vec<usize> {
        self.train
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    /// Every dataset index appears exactly once across all clients.
    pub fn validate_conservation(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for list in self.train.iter().chain(self.test.iter()) {
            for &i in list {
                if i >= dataset_len {
                    return Err(Error::Input(format!("index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Input(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Input(format!("index {missing} unassigned")));
        }
        Ok(())
    }

    /// Deterministic replay manifest: one line per client,
    /// `client<TAB>train:i,i,...<TAB>test:i,i,...`.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for c in 0..self.clients() {
            let join = |v: &[usize]| {
                v.iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!(
                "{c}\ttrain:{}\ttest:{}\n",
                join(&self.train[c]),
                join(&self.test[c])
            ));
        }
        out
    }
}

/// Copies the rows at `indices` into a batch tensor shaped for the given
/// model input, with the matching labels.
pub fn gather_batch(
    features: &Tensor,
    labels: &[usize],
    indices: &[usize],
    input: crate::nn::Dims,
) -> Result<(Tensor, Vec<usize>)> {
    let dim: usize = features.shape()[1..].iter().product();
    if dim != input.volume() {
        return Err(Error::Dimension(format!(
            "feature dim {dim} does not match model input {input:?}"
        )));
    }
    let mut data = Vec::with_capacity(indices.len() * dim);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&features.data()[i * dim..(i + 1) * dim]);
        y.push(labels[i]);
    }
    let bx = Tensor::from_vec(&input.batch_shape(indices.len()), data)?;
    Ok((bx, y))
}

/// Splits one client's indices into train/test with per-label stratification
/// when the client has at least two classes represented.
pub(crate) fn split_train_test(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let classes_present = by_class.iter().filter(|v| !v.is_empty()).count();
    let mut train = Vec::new();
    let mut test = Vec::new();
    if classes_present >= 2 {
        for class in by_class {
            let n_test = (class.len() as f64 * test_fraction).floor() as usize;
            let split = class.len() - n_test;
            train.extend_from_slice(&class[..split]);
            test.extend_from_slice(&class[split..]);
        }
    } else {
        let n_test = (indices.len() as f64 * test_fraction).floor() as usize;
        let split = indices.len() - n_test;
        train.extend_from_slice(&indices[..split]);
        test.extend_from_slice(&indices[split..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
