//! Per-round client selection.

use rand::Rng;

/// Selects max(floor(K * rho), 1) distinct clients uniformly without
/// replacement, returned in ascending id order so aggregation sees a
/// deterministic sequence.
pub fn sample_clients(total: usize, sample_rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let c = ((total as f64 * sample_rate).floor() as usize).max(1).min(total);
    let mut picked = rand::seq::index::sample(rng, total, c).into_vec();
    picked.sort_unstable();
    picked
}
