//! Config file, command-line overrides and their resolution into the
//! core's training configuration.
//!
//! Every setting resolves as: command-line flag, then config file, then the
//! built-in default. The data directory additionally falls back to
//! `BMNN_DATA_DIR` before its (empty) default.

use std::fs;
use std::path::{Path, PathBuf};

use bmnn_core::data::{BatchPlan, CifarVariant};
use bmnn_core::network::{ArchSpec, LayerSpec, Preset};
use bmnn_core::optim::{OptimizerConfig, Rule, Schedule};
use bmnn_core::trainer::TrainConfig;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "BMNN_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn variant(self) -> Option<CifarVariant> {
        match self {
            DatasetKind::Cifar10 => Some(CifarVariant::Cifar10),
            DatasetKind::Cifar100 => Some(CifarVariant::Cifar100),
            DatasetKind::Synthetic => None,
        }
    }
}

/// The on-disk TOML document. All keys are optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<Preset>,
    pub layers: Option<Vec<LayerSpec>>,
    pub rule: Option<Rule>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub nesterov: Option<bool>,
    pub weight_decay: Option<f64>,
    pub schedule: Option<Schedule>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub shuffle: Option<bool>,
    pub flip_prob: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub log_every: Option<usize>,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub classes: Option<usize>,
    pub synthetic_count: Option<usize>,
    pub synthetic_test_count: Option<usize>,
    pub synthetic_shape: Option<Vec<usize>>,
    pub metrics_csv: Option<PathBuf>,
    pub metrics_jsonl: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pair_rule: Option<Rule>,
    pub pair_lr: Option<f64>,
    pub lr_pool: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }
}

fn parse_milestones(s: &str) -> Result<Vec<(usize, f64)>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (e, f) = p.split_once(':').ok_or_else(|| format!("milestone '{p}' is not EPOCH:FACTOR"))?;
            let e = e.trim().parse::<usize>().map_err(|err| format!("milestone epoch '{e}': {err}"))?;
            let f = f.trim().parse::<f64>().map_err(|err| format!("milestone factor '{f}': {err}"))?;
            Ok((e, f))
        })
        .collect()
}

/// Command-line overrides shared by the commands that build a run.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Architecture preset (lenet-bn, lenet-bn-mini, vgg11-bn, ...)
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Update rule: sgd, backmatch, lars or lsalr
    #[arg(long)]
    pub rule: Option<Rule>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_name = "BOOL")]
    pub nesterov: Option<bool>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Multiply the rate by --decay-factor every this many epochs
    #[arg(long, value_name = "EPOCHS", requires = "decay_factor", conflicts_with = "milestones")]
    pub decay_every: Option<usize>,
    #[arg(long, requires = "decay_every")]
    pub decay_factor: Option<f64>,
    /// Comma-separated EPOCH:FACTOR pairs
    #[arg(long, value_parser = parse_milestones)]
    pub milestones: Option<Vec<(usize, f64)>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub shuffle: Option<bool>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate on the test split every this many epochs (0 disables all but the last)
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Record a metrics row every this many steps
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the CIFAR binaries (default: $BMNN_DATA_DIR)
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Number of classes for synthetic data
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long)]
    pub synthetic_test_count: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub metrics_csv: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub metrics_jsonl: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Train a second run with this rule from the same initialization and batches
    #[arg(long)]
    pub pair_rule: Option<Rule>,
    #[arg(long, requires = "pair_rule")]
    pub pair_lr: Option<f64>,
    /// Comma-separated learning rates, trained one after another
    #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "pair_rule")]
    pub lr_pool: Option<Vec<f64>>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub arch: ArchSpec,
    pub rule: Rule,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch: usize,
    pub shuffle: bool,
    pub flip_prob: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub log_every: usize,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub classes: usize,
    pub synthetic_count: usize,
    pub synthetic_test_count: usize,
    pub synthetic_shape: Vec<usize>,
    pub metrics_csv: Option<PathBuf>,
    pub metrics_jsonl: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pair_rule: Option<Rule>,
    pub pair_lr: Option<f64>,
    pub lr_pool: Option<Vec<f64>>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            arch: ArchSpec::Preset(Preset::LenetBn),
            rule: Rule::BackMatch,
            lr: 0.02,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            schedule: Schedule::constant(),
            epochs: 20,
            batch: 128,
            shuffle: true,
            flip_prob: 0.0,
            seed: 0,
            eval_every: 1,
            log_every: 1,
            dataset: DatasetKind::Cifar10,
            data_dir: None,
            train_limit: 5000,
            test_limit: 1000,
            classes: 10,
            synthetic_count: 5000,
            synthetic_test_count: 1000,
            synthetic_shape: vec![3, 32, 32],
            metrics_csv: None,
            metrics_jsonl: None,
            checkpoint: None,
            pair_rule: None,
            pair_lr: None,
            lr_pool: None,
        }
    }
}

impl Settings {
    /// Resolves `flags` over `file` over the defaults. `env_data_dir` is the
    /// value of `BMNN_DATA_DIR`, if set.
    pub fn resolve(flags: &Overrides, file: &FileConfig, env_data_dir: Option<PathBuf>) -> Result<Self, CliError> {
        let d = Settings::default();
        if file.preset.is_some() && file.layers.is_some() {
            return Err(CliError::Config("config sets both 'preset' and 'layers'".into()));
        }
        let arch = match (flags.preset, file.preset, &file.layers) {
            (Some(p), _, _) | (None, Some(p), _) => ArchSpec::Preset(p),
            (None, None, Some(layers)) => ArchSpec::Layers(layers.clone()),
            (None, None, None) => d.arch,
        };
        let schedule = match (flags.decay_every, flags.decay_factor, &flags.milestones) {
            (Some(every), Some(factor), _) => Schedule::Periodic { every, factor },
            (_, _, Some(m)) => Schedule::Milestones { milestones: m.clone() },
            _ => file.schedule.clone().unwrap_or(d.schedule),
        };
        let s = Settings {
            arch,
            rule: flags.rule.or(file.rule).unwrap_or(d.rule),
            lr: flags.lr.or(file.lr).unwrap_or(d.lr),
            momentum: flags.momentum.or(file.momentum).unwrap_or(d.momentum),
            nesterov: flags.nesterov.or(file.nesterov).unwrap_or(d.nesterov),
            weight_decay: flags.weight_decay.or(file.weight_decay).unwrap_or(d.weight_decay),
            schedule,
            epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
            batch: flags.batch.or(file.batch).unwrap_or(d.batch),
            shuffle: flags.shuffle.or(file.shuffle).unwrap_or(d.shuffle),
            flip_prob: flags.flip_prob.or(file.flip_prob).unwrap_or(d.flip_prob),
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
            eval_every: flags.eval_every.or(file.eval_every).unwrap_or(d.eval_every),
            log_every: flags.log_every.or(file.log_every).unwrap_or(d.log_every),
            dataset: flags.dataset.or(file.dataset).unwrap_or(d.dataset),
            data_dir: flags.data_dir.clone().or_else(|| file.data_dir.clone()).or(env_data_dir),
            train_limit: flags.train_limit.or(file.train_limit).unwrap_or(d.train_limit),
            test_limit: flags.test_limit.or(file.test_limit).unwrap_or(d.test_limit),
            classes: flags.classes.or(file.classes).unwrap_or(d.classes),
            synthetic_count: flags.synthetic_count.or(file.synthetic_count).unwrap_or(d.synthetic_count),
            synthetic_test_count: flags
                .synthetic_test_count
                .or(file.synthetic_test_count)
                .unwrap_or(d.synthetic_test_count),
            synthetic_shape: file.synthetic_shape.clone().unwrap_or(d.synthetic_shape),
            metrics_csv: flags.metrics_csv.clone().or_else(|| file.metrics_csv.clone()),
            metrics_jsonl: flags.metrics_jsonl.clone().or_else(|| file.metrics_jsonl.clone()),
            checkpoint: flags.checkpoint.clone().or_else(|| file.checkpoint.clone()),
            pair_rule: flags.pair_rule.or(file.pair_rule),
            pair_lr: flags.pair_lr.or(file.pair_lr),
            lr_pool: flags.lr_pool.clone().or_else(|| file.lr_pool.clone()),
        };
        s.validate()?;
        Ok(s)
    }

    /// Loads the config file named by `flags` (if any) and resolves.
    pub fn from_flags(flags: &Overrides) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let env = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Settings::resolve(flags, &file, env)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("{key}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must lie in [0, 1]");
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.classes < 2 {
                return bad("classes", "synthetic data needs at least 2 classes");
            }
            if self.synthetic_count == 0 {
                return bad("synthetic_count", "must be at least 1");
            }
            if !matches!(self.synthetic_shape.len(), 1 | 3) || self.synthetic_shape.contains(&0) {
                return bad("synthetic_shape", "must be [features] or [c, h, w] with positive entries");
            }
        }
        if self.pair_rule.is_none() && self.pair_lr.is_some() {
            return bad("pair_lr", "needs pair_rule");
        }
        if let Some(pool) = &self.lr_pool {
            if pool.is_empty() {
                return bad("lr_pool", "must list at least one rate");
            }
            if self.pair_rule.is_some() {
                return bad("lr_pool", "cannot be combined with pair_rule");
            }
        }
        for opt in self.optimizers() {
            opt.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            rule: self.rule,
            learning_rate: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            schedule: self.schedule.clone(),
        }
    }

    /// The primary optimizer and, for a paired run, the partner; or one
    /// optimizer per rate of the pool.
    pub fn optimizers(&self) -> Vec<OptimizerConfig> {
        if let Some(pool) = &self.lr_pool {
            return pool
                .iter()
                .map(|&learning_rate| OptimizerConfig { learning_rate, ..self.optimizer() })
                .collect();
        }
        let mut v = vec![self.optimizer()];
        if let Some(rule) = self.pair_rule {
            v.push(OptimizerConfig {
                rule,
                learning_rate: self.pair_lr.unwrap_or(self.lr),
                ..self.optimizer()
            });
        }
        v
    }

    pub fn train_config(&self, optimizer: OptimizerConfig) -> TrainConfig {
        TrainConfig {
            arch: self.arch.clone(),
            optimizer,
            epochs: self.epochs,
            batch: BatchPlan {
                seed: self.seed,
                batch_size: self.batch,
                shuffle: self.shuffle,
                flip_prob: self.flip_prob,
            },
            eval_every: self.eval_every,
            log_every: self.log_every,
            seed: self.seed,
            metrics_csv: None,
            metrics_jsonl: None,
            checkpoint: None,
        }
    }

    /// Per-sample input shape and class count, without loading any data.
    pub fn input_geometry(&self) -> (Vec<usize>, usize) {
        match self.dataset.variant() {
            Some(v) => (vec![3, 32, 32], v.classes()),
            None => (self.synthetic_shape.clone(), self.classes),
        }
    }
}

/// `path` itself for a single run, otherwise `stem.tag.ext`.
pub fn run_path(path: &Path, tag: Option<&str>) -> PathBuf {
    let Some(tag) = tag else {
        return path.to_path_buf();
    };
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}
