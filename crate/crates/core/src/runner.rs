//! Experiment orchestration: data preparation, repetition loop, CSV output.

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{self, Dataset, Partition};
use crate::error::{Error, Result};
use crate::fed::{self, Algorithm, RoundMetrics};
use crate::mask::MaskLayout;
use crate::nn::{self, Dims, ModelKind};
use crate::prune::PruneMask;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const METRICS_SCHEMA: &str = "# hidenseek-metrics v1";
pub const SUMMARY_SCHEMA: &str = "# hidenseek-summary v1";
pub const COST_SCHEMA: &str = "# hidenseek-cost v1";

pub struct PreparedData {
    pub dataset: Dataset,
    pub partition: Partition,
    pub input: Dims,
    pub classes: usize,
}

fn model_input(model: ModelKind, feature_dim: usize) -> Dims {
    match model {
        ModelKind::Mlp => Dims::Flat(feature_dim),
        ModelKind::SmallCnn | ModelKind::Vgg9 => Dims::Chw(1, 28, 28),
    }
}

/// Loads the configured dataset and builds the client partition
/// (Dirichlet for the image sets, the natural subject split for HAR).
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let clients = cfg.clients.expect("resolved config");
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let dataset = data::synthetic_blobs(
                cfg.synthetic_classes,
                cfg.synthetic_dims,
                cfg.synthetic_per_class,
                cfg.synthetic_std_dev,
                cfg.seed,
            )?;
            let partition = data::dirichlet_partition(
                &dataset.labels,
                dataset.num_classes,
                clients,
                cfg.alpha,
                cfg.seed,
                cfg.test_fraction,
            )?;
            let input = model_input(cfg.model, dataset.feature_dim());
            let classes = dataset.num_classes;
            Ok(PreparedData { dataset, partition, input, classes })
        }
        DatasetKind::Har => {
            let root = cfg.data_dir.join("har");
            let (dataset, subjects) = data::load_har(&root)?;
            let partition = data::har::subject_partition(
                &subjects,
                &dataset.labels,
                dataset.num_classes,
                cfg.test_fraction,
            )?;
            if partition.clients() != clients {
                return Err(Error::Config(format!(
                    "har has {} subjects, config wants {clients} clients",
                    partition.clients()
                )));
            }
            let input = model_input(cfg.model, dataset.feature_dim());
            let classes = dataset.num_classes;
            Ok(PreparedData { dataset, partition, input, classes })
        }
        DatasetKind::Mnist | DatasetKind::Emnist => {
            let (dir, stem) = match cfg.dataset {
                DatasetKind::Mnist => ("mnist", "train"),
                _ => ("emnist", "emnist-train"),
            };
            let root = cfg.data_dir.join(dir);
            let images = root.join(format!("{stem}-images-idx3-ubyte"));
            let labels = root.join(format!("{stem}-labels-idx1-ubyte"));
            let mut dataset = data::load_idx(&images, &labels)?;
            if cfg.subset > 0 {
                dataset = dataset.truncated(cfg.subset)?;
            }
            let partition = data::dirichlet_partition(
                &dataset.labels,
                dataset.num_classes,
                clients,
                cfg.alpha,
                cfg.seed,
                cfg.test_fraction,
            )?;
            let input = model_input(cfg.model, dataset.feature_dim());
            let classes = dataset.num_classes;
            Ok(PreparedData { dataset, partition, input, classes })
        }
    }
}

/// One full training run at the given seed; pure function of its inputs.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, prepared: &PreparedData) -> Result<fed::TrainOutcome> {
    let specs = nn::model_spec(cfg.model, prepared.input, prepared.classes)?;
    let mut fed_cfg = cfg.fed_config();
    fed_cfg.seed = seed;
    fed::run_training(
        &fed_cfg,
        &cfg.prune_config(),
        specs,
        prepared.input,
        &prepared.dataset,
        &prepared.partition,
    )
}

pub fn metrics_csv(algorithm: Algorithm, metrics: &[RoundMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_SCHEMA);
    out.push('\n');
    out.push_str("round,algorithm,weighted_accuracy,mean_loss,upload_bytes,download_bytes,active_clients\n");
    for m in metrics {
        let ids = m
            .active_clients
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.1},{:.1},{}",
            m.round,
            algorithm.name(),
            m.weighted_accuracy,
            m.mean_loss,
            m.mean_upload(),
            m.mean_download(),
            ids
        );
    }
    out
}

/// Mean and sample standard deviation of the final-round accuracy.
pub fn summarize_finals(finals: &[f64]) -> (f64, f64) {
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let std = if finals.len() > 1 {
        (finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn summary_csv(finals: &[f64]) -> String {
    let (mean, std) = summarize_finals(finals);
    let mut out = String::new();
    out.push_str(SUMMARY_SCHEMA);
    out.push('\n');
    out.push_str("repetitions,final_accuracy_mean,final_accuracy_std\n");
    let _ = writeln!(out, "{},{:.6},{:.6}", finals.len(), mean, std);
    out
}

/// Runs `repetitions` trainings at seeds seed..seed+r, writing
/// `metrics_seed{r}.csv` per repetition, a `summary.csv`, and the resolved
/// config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out_dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config_resolved.toml"), cfg.to_toml()?)?;

    let mut finals = Vec::with_capacity(cfg.repetitions);
    for r in 0..cfg.repetitions {
        let seed = cfg.seed + r as u64;
        let mut rep_cfg = cfg.clone();
        rep_cfg.seed = seed;
        let prepared = prepare_data(&rep_cfg)?;
        let outcome = run_single(&rep_cfg, seed, &prepared)?;
        // replay manifest: which sample indices each client held
        std::fs::write(
            out_dir.join(format!("partition_seed{r}.tsv")),
            prepared.partition.to_manifest(),
        )?;
        let csv = metrics_csv(cfg.algorithm, &outcome.metrics);
        let path = out_dir.join(format!("metrics_seed{r}.csv"));
        std::fs::write(&path, csv)?;
        // read the final accuracy back from the file so the summary
        // recomputes exactly from what the per-seed CSVs say
        finals.push(if outcome.metrics.is_empty() {
            0.0
        } else {
            final_accuracy_of_csv(&path)?
        });
    }
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&finals))?;
    Ok(out_dir)
}

/// Initializes and prunes without training; writes the pruned checkpoint and
/// a kept-units report.
pub fn run_prune_only(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out_dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config_resolved.toml"), cfg.to_toml()?)?;
    let prepared = prepare_data(cfg)?;
    let specs = nn::model_spec(cfg.model, prepared.input, prepared.classes)?;
    let fed_cfg = cfg.fed_config();
    let (model, mask) = fed::setup_model(specs, prepared.input, &fed_cfg, &cfg.prune_config())?;
    nn::checkpoint::save(&out_dir.join("pruned.hns"), &model, Some(&mask))?;
    let mut report = String::from("# hidenseek-kept-units v1\nlayer,kind,units_total,units_kept\n");
    for l in model.weighted_layers() {
        let total = model.specs[l].kind.unit_count();
        let kept = mask.kept_units(l);
        let kind = match model.specs[l].kind {
            nn::LayerKind::Dense { .. } => "dense",
            nn::LayerKind::Conv2d { .. } => "conv2d",
            _ => unreachable!(),
        };
        let _ = writeln!(report, "{l},{kind},{total},{kept}");
    }
    std::fs::write(out_dir.join("kept_units.csv"), report)?;
    Ok(out_dir)
}

/// Transfer-cost table for every algorithm on the configured model, without
/// training. The hidenseek row reflects the actual server pruning at the
/// configured keep rate.
pub fn cost_report(cfg: &ExperimentConfig) -> Result<String> {
    let prepared = prepare_data(cfg)?;
    let specs = nn::model_spec(cfg.model, prepared.input, prepared.classes)?;
    let unpruned = nn::init_model(specs.clone(), prepared.input, cfg.seed)?;

    let mut rows = String::new();
    rows.push_str(COST_SCHEMA);
    rows.push('\n');
    rows.push_str(
        "algorithm,upload_bytes,download_bytes,upload_mib,download_mib,upload_packed_bytes,download_packed_bytes\n",
    );
    for algorithm in [
        Algorithm::Fedavg,
        Algorithm::Fedmask,
        Algorithm::Signed,
        Algorithm::Hidenseek,
    ] {
        let (model, prune) = if algorithm == Algorithm::Hidenseek {
            let mut fed_cfg = cfg.fed_config();
            fed_cfg.algorithm = Algorithm::Hidenseek;
            fed::setup_model(specs.clone(), prepared.input, &fed_cfg, &cfg.prune_config())?
        } else {
            (unpruned.clone(), PruneMask::all_keep(&unpruned))
        };
        let cost = fed::comm_cost(&model, &prune, algorithm, cfg.keep_rate)?;
        let _ = writeln!(
            rows,
            "{},{},{},{:.2},{:.2},{},{}",
            algorithm.name(),
            cost.upload_bytes,
            cost.download_bytes,
            fed::cost::mib(cost.upload_bytes),
            fed::cost::mib(cost.download_bytes),
            cost.upload_packed,
            cost.download_packed
        );
    }
    let full_binary = fed::cost::full_binary_reference_bytes(&unpruned);
    let _ = writeln!(
        rows,
        "full_binary_reference,{0},{0},{1:.2},{1:.2},{0},{0}",
        full_binary,
        fed::cost::mib(full_binary)
    );
    Ok(rows)
}

pub fn run_cost(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out_dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let report = cost_report(cfg)?;
    print!("{report}");
    std::fs::write(out_dir.join("cost.csv"), report)?;
    Ok(out_dir)
}

/// Re-derives the mask layout of a trained outcome, for audits.
pub fn outcome_layout(model: &nn::Model, prune: &PruneMask) -> Result<MaskLayout> {
    MaskLayout::from_model(model, prune)
}

/// Reads the final weighted accuracy out of a metrics CSV produced by
/// `metrics_csv`.
pub fn final_accuracy_of_csv(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path)?;
    let last = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("round,"))
        .next_back()
        .ok_or_else(|| Error::Input(format!("{}: no data rows", path.display())))?;
    let field = last
        .split(',')
        .nth(2)
        .ok_or_else(|| Error::Input(format!("{}: malformed row", path.display())))?;
    field
        .parse::<f64>()
        .map_err(|e| Error::Input(format!("{}: bad accuracy field: {e}", path.display())))
}
