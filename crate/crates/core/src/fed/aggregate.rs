//! Server-side mask aggregation: an arctanh vote over quantized sign masks,
//! and its logit analog for binary masks.

use crate::error::{Error, Result};

/// New real-valued global latents from the cohort's quantized sign masks:
/// latent = arctanh(clamp(sum_k (n_k / n) s_k, -1+eps, 1-eps)), with sample
/// counts normalized over the participating cohort.
pub fn aggregate_signs(
    masks: &[Vec<f32>],
    sample_counts: &[u64],
    clamp_eps: f64,
) -> Result<Vec<f32>> {
    let sums = weighted_vote(masks, sample_counts)?;
    Ok(sums
        .into_iter()
        .map(|s| clamped_atanh(s, clamp_eps))
        .collect())
}

/// Weighted per-entry vote sum_k (n_k / n) m_k without the arctanh map.
pub fn weighted_vote(masks: &[Vec<f32>], sample_counts: &[u64]) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::Protocol("aggregation over an empty cohort".into()));
    }
    if masks.len() != sample_counts.len() {
        return Err(Error::Protocol(format!(
            "{} masks for {} sample counts",
            masks.len(),
            sample_counts.len()
        )));
    }
    let total: u64 = sample_counts.iter().sum();
    if total == 0 {
        return Err(Error::Protocol("cohort has zero total samples".into()));
    }
    let len = masks[0].len();
    let mut sums = vec![0.0f64; len];
    for (mask, &n_k) in masks.iter().zip(sample_counts.iter()) {
        if mask.len() != len {
            return Err(Error::Protocol(format!(
                "mask length {} does not match cohort {}",
                mask.len(),
                len
            )));
        }
        let w = n_k as f64 / total as f64;
        for (acc, &v) in sums.iter_mut().zip(mask.iter()) {
            *acc += w * v as f64;
        }
    }
    Ok(sums)
}

pub fn clamped_atanh(vote: f64, clamp_eps: f64) -> f32 {
    let limit = 1.0 - clamp_eps;
    vote.clamp(-limit, limit).atanh() as f32
}

/// Logit map for binary-mask probabilities, clamped away from {0, 1}.
pub fn clamped_logit(p: f64, clamp_eps: f64) -> f32 {
    let p = p.clamp(clamp_eps, 1.0 - clamp_eps);
    (p / (1.0 - p)).ln() as f32
}
