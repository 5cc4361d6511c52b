//! Softmax cross-entropy with analytic logits gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-softmax of the labeled class. Loss accumulates in f64;
/// the gradient is (softmax - onehot) / batch_size.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "logits must be [batch, classes], got {shape:?}"
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor::zeros(shape);
    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f32;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        loss -= (row[label] - max) as f64 - log_denom;
        let grow = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (c, gc) in grow.iter_mut().enumerate() {
            let p = (((row[c] - max) as f64).exp() / denom) as f32;
            *gc = (p - if c == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Fraction of rows whose argmax equals the label, as a count of hits.
pub fn correct_count(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count()
}
