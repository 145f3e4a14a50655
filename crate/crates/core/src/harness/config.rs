//! Experiment configuration: flat `key = value` lines, `#` comments,
//! dotted keys for grouped settings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::train::{Augmentation, TrainConfig};

use super::data::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdxPaths {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub synthetic: SyntheticSpec,
    pub idx: IdxPaths,
    /// `input_shape` is taken from the data at run time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phases: usize,
    /// Seeds model init, class split and training order.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write measured seconds into `metrics.csv` (breaks byte-for-byte
    /// reproducibility).
    pub wall_clock: bool,
    /// Test images used for the phase-start identity check.
    pub probe_size: usize,
}

/// Every accepted key, in the order `to_text` writes them.
pub const VALID_KEYS: &[&str] = &[
    "dataset",
    "synthetic.classes",
    "synthetic.train_per_class",
    "synthetic.test_per_class",
    "synthetic.size",
    "synthetic.noise",
    "synthetic.seed",
    "idx.train_images",
    "idx.train_labels",
    "idx.test_images",
    "idx.test_labels",
    "model.stage_channels",
    "model.blocks_per_stage",
    "model.feature_dim",
    "model.ratio",
    "initial_epochs",
    "incremental_epochs",
    "prune_at_epoch",
    "keep_ratio",
    "lr_initial",
    "lr_incremental",
    "lr_decay_factor",
    "lr_decay_every",
    "batch_size",
    "gamma",
    "lambda",
    "augmentation",
    "score_window",
    "grad_clip",
    "phases",
    "seed",
    "out_dir",
    "metrics.wall_clock",
    "probe_size",
];

impl Default for ExperimentConfig {
    /// Desk-scale run on the synthetic tiles.
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            synthetic: SyntheticSpec::default(),
            idx: IdxPaths::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                initial_epochs: 20,
                incremental_epochs: 10,
                prune_at_epoch: 3,
                keep_ratio: 0.5,
                lr_initial: 0.05,
                lr_incremental: 0.01,
                batch_size: 8,
                grad_clip: 3.0,
                ..TrainConfig::default()
            },
            phases: 5,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            wall_clock: false,
            probe_size: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config(format!("{key} needs at least one value")))
            } else {
                Ok(v)
            }
        })
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "idx" => DatasetKind::Idx,
                    _ => {
                        return Err(Error::Config(format!(
                            "dataset must be synthetic or idx, got {v:?}"
                        )))
                    }
                }
            }
            "synthetic.classes" => self.synthetic.classes = parse(key, v)?,
            "synthetic.train_per_class" => self.synthetic.train_per_class = parse(key, v)?,
            "synthetic.test_per_class" => self.synthetic.test_per_class = parse(key, v)?,
            "synthetic.size" => self.synthetic.size = parse(key, v)?,
            "synthetic.noise" => self.synthetic.noise = parse(key, v)?,
            "synthetic.seed" => self.synthetic.seed = parse(key, v)?,
            "idx.train_images" => self.idx.train_images = Some(v.into()),
            "idx.train_labels" => self.idx.train_labels = Some(v.into()),
            "idx.test_images" => self.idx.test_images = Some(v.into()),
            "idx.test_labels" => self.idx.test_labels = Some(v.into()),
            "model.stage_channels" => self.model.stage_channels = parse_list(key, v)?,
            "model.blocks_per_stage" => self.model.blocks_per_stage = parse_list(key, v)?,
            "model.feature_dim" => self.model.feature_dim = parse(key, v)?,
            "model.ratio" => self.model.ratio = parse(key, v)?,
            "initial_epochs" => t.initial_epochs = parse(key, v)?,
            "incremental_epochs" => t.incremental_epochs = parse(key, v)?,
            "prune_at_epoch" => t.prune_at_epoch = parse(key, v)?,
            "keep_ratio" => t.keep_ratio = parse(key, v)?,
            "lr_initial" => t.lr_initial = parse(key, v)?,
            "lr_incremental" => t.lr_incremental = parse(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "augmentation" => t.augmentation = v.parse::<Augmentation>()?,
            "score_window" => t.score_window = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "phases" => self.phases = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = v.into(),
            "metrics.wall_clock" => self.wall_clock = parse(key, v)?,
            "probe_size" => self.probe_size = parse(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Defaults updated by every assignment in `text`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, config_detail(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.phases == 0 {
            return Err(Error::Config("phases must be >= 1".into()));
        }
        if self.dataset == DatasetKind::Idx {
            let i = &self.idx;
            if [&i.train_images, &i.train_labels, &i.test_images, &i.test_labels]
                .iter()
                .any(|p| p.is_none())
            {
                return Err(Error::Config(
                    "dataset = idx needs idx.train_images, idx.train_labels, idx.test_images and idx.test_labels".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synthetic;
        let mut out = String::new();
        for key in VALID_KEYS {
            let value = match *key {
                "dataset" => match self.dataset {
                    DatasetKind::Synthetic => "synthetic".into(),
                    DatasetKind::Idx => "idx".into(),
                },
                "synthetic.classes" => s.classes.to_string(),
                "synthetic.train_per_class" => s.train_per_class.to_string(),
                "synthetic.test_per_class" => s.test_per_class.to_string(),
                "synthetic.size" => s.size.to_string(),
                "synthetic.noise" => s.noise.to_string(),
                "synthetic.seed" => s.seed.to_string(),
                "idx.train_images" => path_text(&self.idx.train_images),
                "idx.train_labels" => path_text(&self.idx.train_labels),
                "idx.test_images" => path_text(&self.idx.test_images),
                "idx.test_labels" => path_text(&self.idx.test_labels),
                "model.stage_channels" => join(&self.model.stage_channels),
                "model.blocks_per_stage" => join(&self.model.blocks_per_stage),
                "model.feature_dim" => self.model.feature_dim.to_string(),
                "model.ratio" => self.model.ratio.to_string(),
                "initial_epochs" => t.initial_epochs.to_string(),
                "incremental_epochs" => t.incremental_epochs.to_string(),
                "prune_at_epoch" => t.prune_at_epoch.to_string(),
                "keep_ratio" => t.keep_ratio.to_string(),
                "lr_initial" => t.lr_initial.to_string(),
                "lr_incremental" => t.lr_incremental.to_string(),
                "lr_decay_factor" => t.lr_decay_factor.to_string(),
                "lr_decay_every" => t.lr_decay_every.to_string(),
                "batch_size" => t.batch_size.to_string(),
                "gamma" => t.gamma.to_string(),
                "lambda" => t.lambda.to_string(),
                "augmentation" => t.augmentation.to_string(),
                "score_window" => t.score_window.to_string(),
                "grad_clip" => t.grad_clip.to_string(),
                "phases" => self.phases.to_string(),
                "seed" => self.seed.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "metrics.wall_clock" => self.wall_clock.to_string(),
                "probe_size" => self.probe_size.to_string(),
                other => unreachable!("key {other} has no renderer"),
            };
            if value.is_empty() {
                continue;
            }
            writeln!(out, "{key} = {value}").expect("writing to a String cannot fail");
        }
        out
    }
}

fn config_detail(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
