//! Experiment configuration: TOML files plus key=value overrides, with every
//! default filled in so an empty file is a complete baseline experiment.

use crate::error::{Error, Result};
use crate::fed::{Algorithm, FedConfig};
use crate::mask::PsiKind;
use crate::nn::ModelKind;
use crate::prune::{PruneConfig, QuantilePopulation, Schedule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Emnist,
    Har,
    Synthetic,
}

impl DatasetKind {
    fn default_clients(&self) -> usize {
        match self {
            DatasetKind::Mnist => 160,
            DatasetKind::Emnist => 320,
            DatasetKind::Har => 30,
            DatasetKind::Synthetic => 10,
        }
    }

    fn default_rounds(&self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::Emnist => 300,
            DatasetKind::Har => 200,
            DatasetKind::Synthetic => 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub model: ModelKind,
    pub algorithm: Algorithm,
    /// K; dataset-specific default (HAR is fixed to its 30 subjects).
    pub clients: Option<usize>,
    pub sample_rate: f64,
    pub local_epochs: usize,
    /// T; dataset-specific default.
    pub rounds: Option<usize>,
    pub batch_size: usize,
    /// Algorithm learning rate; per-algorithm default.
    pub lr: Option<f32>,
    pub classifier_lr: f32,
    pub momentum: f32,
    pub keep_rate: f32,
    pub prune_iterations: usize,
    pub prune_schedule: Schedule,
    pub quantile_population: QuantilePopulation,
    pub clamp_eps: f64,
    pub seed: u64,
    /// Dirichlet concentration for label partitioning.
    pub alpha: f64,
    pub test_fraction: f64,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub psi: PsiKind,
    pub broadcast_client_product: bool,
    pub fedmask_l1: f32,
    pub workers: usize,
    /// Cap on dataset size for reduced-scale runs (0 = use everything).
    pub subset: usize,
    pub synthetic_classes: usize,
    pub synthetic_dims: usize,
    pub synthetic_per_class: usize,
    pub synthetic_std_dev: f32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            model: ModelKind::Mlp,
            algorithm: Algorithm::Hidenseek,
            clients: None,
            sample_rate: 0.1,
            local_epochs: 5,
            rounds: None,
            batch_size: 32,
            lr: None,
            classifier_lr: 1e-3,
            momentum: 0.9,
            keep_rate: 0.8,
            prune_iterations: 100,
            prune_schedule: Schedule::Fixed,
            quantile_population: QuantilePopulation::Surviving,
            clamp_eps: 1e-3,
            seed: 1,
            alpha: 1.0,
            test_fraction: 0.2,
            repetitions: 3,
            output_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("data"),
            psi: PsiKind::TanhExact,
            broadcast_client_product: false,
            fedmask_l1: 0.0,
            workers: 1,
            subset: 0,
            synthetic_classes: 4,
            synthetic_dims: 24,
            synthetic_per_class: 250,
            synthetic_std_dev: 0.15,
        }
    }
}

impl ExperimentConfig {
    /// Fills dataset/algorithm-dependent defaults so every field is concrete.
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        if self.clients.is_none() {
            self.clients = Some(self.dataset.default_clients());
        }
        if self.rounds.is_none() {
            self.rounds = Some(self.dataset.default_rounds());
        }
        if self.lr.is_none() {
            self.lr = Some(self.algorithm.default_lr());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return fail(format!("sample_rate must be in (0, 1], got {}", self.sample_rate));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return fail(format!("keep_rate must be in (0, 1], got {}", self.keep_rate));
        }
        if self.prune_iterations == 0 {
            return fail("prune_iterations must be >= 1".into());
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!(
                "test_fraction must be in [0, 1), got {}",
                self.test_fraction
            ));
        }
        if self.repetitions == 0 {
            return fail("repetitions must be >= 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be >= 1".into());
        }
        if let Some(lr) = self.lr {
            if lr.is_nan() || lr <= 0.0 {
                return fail(format!("lr must be positive, got {lr}"));
            }
        }
        if self.classifier_lr.is_nan() || self.classifier_lr <= 0.0 {
            return fail(format!("classifier_lr must be positive, got {}", self.classifier_lr));
        }
        if let (
            ModelKind::SmallCnn | ModelKind::Vgg9,
            DatasetKind::Har | DatasetKind::Synthetic,
        ) = (self.model, self.dataset)
        {
            return fail(format!(
                "{:?} needs 28x28 image input; dataset {:?} is flat",
                self.model, self.dataset
            ));
        }
        if self.dataset == DatasetKind::Har {
            if let Some(k) = self.clients {
                if k != 30 {
                    return fail(format!(
                        "har uses its natural 30-subject split; clients must be 30, got {k}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            algorithm: self.algorithm,
            clients: self.clients.expect("resolved config"),
            sample_rate: self.sample_rate,
            local_epochs: self.local_epochs,
            rounds: self.rounds.expect("resolved config"),
            batch_size: self.batch_size,
            lr: self.lr.expect("resolved config"),
            classifier_lr: self.classifier_lr,
            momentum: self.momentum,
            clamp_eps: self.clamp_eps,
            seed: self.seed,
            psi: self.psi,
            broadcast_client_product: self.broadcast_client_product,
            fedmask_l1: self.fedmask_l1,
            workers: self.workers,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            keep_rate: self.keep_rate,
            iterations: self.prune_iterations,
            schedule: self.prune_schedule,
            population: self.quantile_population,
        }
    }

    /// Output directory, honoring the HNS_OUTPUT_ROOT environment variable
    /// as a prefix for relative paths.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("HNS_OUTPUT_ROOT") {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

/// Parses a config file (TOML, flat keys) and applies `key=value` overrides.
/// Unknown keys are rejected. An empty or absent file yields pure defaults.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

/// Same as [`parse_config`], from in-memory TOML text.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text)
        .map_err(|e| Error::Config(format!("parse config: {e}")))?;
    for (key, value) in overrides {
        let parsed = parse_override_value(value);
        table.insert(key.clone(), parsed);
    }
    let cfg: ExperimentConfig = toml::Table::try_into(table)
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.resolve()
}

/// Splits a `key=value` override argument.
pub fn split_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override must be key=value, got '{arg}'"))),
    }
}

fn parse_override_value(value: &str) -> toml::Value {
    if let Ok(b) = value.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = value.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = value.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(value.to_string())
}
