//! UCI HAR raw inertial signals: 9 channels x 128 samples per window,
//! flattened channel-major into 1152-dimensional feature vectors over six
//! activity classes. The train and test halves of the distribution are
//! merged; subject ids are kept so each of the 30 subjects can act as one
//! federated client.

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const CHANNELS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];
pub const WINDOW: usize = 128;
pub const FEATURES: usize = 9 * WINDOW;
pub const CLASSES: usize = 6;

fn parse_signal_file(path: &Path) -> Result<Vec<[f32; WINDOW]>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Input(format!("missing channel file {}: {e}", path.display()))
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = [0.0f32; WINDOW];
        let mut count = 0;
        for tok in line.split_whitespace() {
            if count >= WINDOW {
                count += 1;
                break;
            }
            row[count] = tok.parse::<f32>().map_err(|e| Error::Parse {
                offset: lineno as u64,
                message: format!("{}: line {}: {e}", path.display(), lineno + 1),
            })?;
            count += 1;
        }
        if count != WINDOW {
            return Err(Error::Parse {
                offset: lineno as u64,
                message: format!(
                    "{}: line {} has {count} values, expected {WINDOW}",
                    path.display(),
                    lineno + 1
                ),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_int_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Input(format!("missing file {}: {e}", path.display()))
    })?;
    text.split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<usize>().map_err(|e| Error::Parse {
                offset: i as u64,
                message: format!("{}: token {}: {e}", path.display(), i),
            })
        })
        .collect()
}

fn load_split(root: &Path, split: &str) -> Result<(Vec<f32>, Vec<usize>, Vec<usize>)> {
    let signals = root.join(split).join("Inertial Signals");
    let mut per_channel = Vec::with_capacity(CHANNELS.len());
    for ch in CHANNELS {
        let path = signals.join(format!("{ch}_{split}.txt"));
        per_channel.push(parse_signal_file(&path)?);
    }
    let n = per_channel[0].len();
    for (ci, rows) in per_channel.iter().enumerate() {
        if rows.len() != n {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "channel {} has {} windows, channel {} has {n}",
                    CHANNELS[ci],
                    rows.len(),
                    CHANNELS[0]
                ),
            });
        }
    }
    let labels_raw = parse_int_file(&root.join(split).join(format!("y_{split}.txt")))?;
    let subjects = parse_int_file(&root.join(split).join(format!("subject_{split}.txt")))?;
    if labels_raw.len() != n || subjects.len() != n {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "{split}: {} labels / {} subjects for {n} windows",
                labels_raw.len(),
                subjects.len()
            ),
        });
    }
    // channel-major flatten: [ch0 window | ch1 window | ...]
    let mut features = Vec::with_capacity(n * FEATURES);
    for i in 0..n {
        for rows in &per_channel {
            features.extend_from_slice(&rows[i]);
        }
    }
    let labels = labels_raw
        .iter()
        .map(|&l| {
            if (1..=CLASSES).contains(&l) {
                Ok(l - 1)
            } else {
                Err(Error::Input(format!("activity label {l} outside 1..=6")))
            }
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok((features, labels, subjects))
}

/// Loads both distribution splits from the dataset root (the directory
/// holding `train/` and `test/`). Returns the merged dataset and the
/// 1-based subject id of every sample.
pub fn load_har(root: &Path) -> Result<(Dataset, Vec<usize>)> {
    let (mut features, mut labels, mut subjects) = load_split(root, "train")?;
    let (tf, tl, ts) = load_split(root, "test")?;
    features.extend(tf);
    labels.extend(tl);
    subjects.extend(ts);
    let n = labels.len();
    let dataset = Dataset::new(
        Tensor::from_vec(&[n, FEATURES], features)?,
        labels,
        CLASSES,
    )?;
    Ok((dataset, subjects))
}

/// Natural per-subject partition: subject k (1-based) becomes client k-1,
/// each with a stratified train/test split of its own windows.
pub fn subject_partition(
    subjects: &[usize],
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
) -> Result<super::Partition> {
    let max_subject = *subjects
        .iter()
        .max()
        .ok_or_else(|| Error::Input("no subjects".into()))?;
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); max_subject];
    for (i, &s) in subjects.iter().enumerate() {
        if s == 0 {
            return Err(Error::Input("subject ids are 1-based".into()));
        }
        per_client[s - 1].push(i);
    }
    let mut train = Vec::with_capacity(max_subject);
    let mut test = Vec::with_capacity(max_subject);
    for indices in &per_client {
        let (tr, te) = super::split_train_test(indices, labels, num_classes, test_fraction);
        train.push(tr);
        test.push(te);
    }
    Ok(super::Partition { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(root: &Path, split: &str, windows: usize, subject_of: impl Fn(usize) -> usize) {
        let signals = root.join(split).join("Inertial Signals");
        std::fs::create_dir_all(&signals).unwrap();
        for (ci, ch) in CHANNELS.iter().enumerate() {
            let mut text = String::new();
            for w in 0..windows {
                let row: Vec<String> = (0..WINDOW)
                    .map(|i| format!("{:.6e}", (ci * 1000 + w * 10 + i) as f32 * 1e-4))
                    .collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
            std::fs::write(signals.join(format!("{ch}_{split}.txt")), text).unwrap();
        }
        let labels: Vec<String> = (0..windows).map(|w| ((w % 6) + 1).to_string()).collect();
        std::fs::write(root.join(split).join(format!("y_{split}.txt")), labels.join("\n")).unwrap();
        let subjects: Vec<String> = (0..windows).map(|w| subject_of(w).to_string()).collect();
        std::fs::write(
            root.join(split).join(format!("subject_{split}.txt")),
            subjects.join("\n"),
        )
        .unwrap();
    }

    #[test]
    fn loads_merged_splits_with_1152_features() {
        let root = std::env::temp_dir().join(format!("hns_har_{}", std::process::id()));
        write_fixture(&root, "train", 12, |w| (w % 3) + 1);
        write_fixture(&root, "test", 6, |w| (w % 3) + 1);
        let (ds, subjects) = load_har(&root).unwrap();
        assert_eq!(ds.feature_dim(), 1152);
        assert_eq!(ds.num_classes, 6);
        assert_eq!(ds.len(), 18);
        assert_eq!(subjects.len(), 18);
        // channel-major ordering: second channel block starts at offset 128
        let first = ds.features.data()[0];
        let second_block = ds.features.data()[WINDOW];
        assert!(first < second_block, "channel blocks are laid out in order");
        let distinct: std::collections::BTreeSet<usize> = subjects.iter().copied().collect();
        assert_eq!(distinct.len(), 3);
        let part = subject_partition(&subjects, &ds.labels, 6, 0.2).unwrap();
        assert_eq!(part.clients(), 3);
        part.validate_conservation(ds.len()).unwrap();
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn missing_channel_file_is_input_error() {
        let root = std::env::temp_dir().join(format!("hns_har_missing_{}", std::process::id()));
        write_fixture(&root, "train", 4, |_| 1);
        write_fixture(&root, "test", 2, |_| 1);
        std::fs::remove_file(
            root.join("train/Inertial Signals/body_gyro_y_train.txt"),
        )
        .unwrap();
        assert!(matches!(load_har(&root), Err(Error::Input(_))));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn row_count_mismatch_is_parse_error() {
        let root = std::env::temp_dir().join(format!("hns_har_mismatch_{}", std::process::id()));
        write_fixture(&root, "train", 4, |_| 1);
        write_fixture(&root, "test", 2, |_| 1);
        // one channel loses a row
        let path = root.join("train/Inertial Signals/total_acc_z_train.txt");
        let text = std::fs::read_to_string(&path).unwrap();
        let shorter: Vec<&str> = text.lines().take(3).collect();
        std::fs::write(&path, shorter.join("\n")).unwrap();
        assert!(matches!(load_har(&root), Err(Error::Parse { .. })));
        std::fs::remove_dir_all(&root).ok();
    }
}
