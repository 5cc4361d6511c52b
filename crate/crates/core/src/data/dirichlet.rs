//! Non-IID label partitioning by per-class Dirichlet proportions.

use super::{split_train_test, Partition};
use crate::error::{Error, Result};
use crate::rng::{self, PURPOSE_PARTITION};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// For each class, draws client proportions p ~ Dir(alpha * 1_K) and deals
/// that class's samples out by the proportions (largest remainder for the
/// leftovers). Smaller alpha concentrates classes on fewer clients. Clients
/// may end up empty; callers can check `Partition::empty_clients`.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
    test_fraction: f64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = rng::stream(&[seed, PURPOSE_PARTITION, clients as u64]);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("invalid Dirichlet alpha {alpha}: {e}")))?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        by_class[label].push(i);
    }

    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for mut class_indices in by_class {
        if class_indices.is_empty() {
            continue;
        }
        class_indices.shuffle(&mut rng);
        // Dirichlet draw via normalized Gammas; guard an all-zero draw.
        let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            let lucky = rng.random_range(0..clients);
            props = vec![0.0; clients];
            props[lucky] = 1.0;
        }
        let total: f64 = props.iter().sum();
        let n = class_indices.len();
        // integer allotment by largest remainder
        let mut counts: Vec<usize> = Vec::with_capacity(clients);
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(clients);
        let mut assigned = 0usize;
        for (c, &p) in props.iter().enumerate() {
            let exact = p / total * n as f64;
            let floor = exact.floor() as usize;
            counts.push(floor);
            remainders.push((c, exact - floor as f64));
            assigned += floor;
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(c, _) in remainders.iter().take(n - assigned) {
            counts[c] += 1;
        }
        let mut cursor = 0;
        for (c, &count) in counts.iter().enumerate() {
            per_client[c].extend_from_slice(&class_indices[cursor..cursor + count]);
            cursor += count;
        }
    }

    let mut train = Vec::with_capacity(clients);
    let mut test = Vec::with_capacity(clients);
    for indices in &mut per_client {
        indices.sort_unstable();
        let (tr, te) = split_train_test(indices, labels, num_classes, test_fraction);
        train.push(tr);
        test.push(te);
    }
    Ok(Partition { train, test })
}

/// Mean over clients of the label entropy (nats) of their local samples.
/// Used to quantify heterogeneity: smaller alpha gives lower entropy.
pub fn mean_label_entropy(partition: &Partition, labels: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..partition.clients() {
        let mut counts = vec![0usize; num_classes];
        let mut n = 0usize;
        for &i in partition.train[c].iter().chain(partition.test[c].iter()) {
            counts[labels[i]] += 1;
            n += 1;
        }
        if n == 0 {
            continue;
        }
        let mut h = 0.0;
        for &count in &counts {
            if count > 0 {
                let p = count as f64 / n as f64;
                h -= p * p.ln();
            }
        }
        total += h;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
