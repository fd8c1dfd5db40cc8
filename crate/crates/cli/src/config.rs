//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fednorm_core::diagnostics::ToyShiftConfig;
use fednorm_core::fed::{FedConfig, ModelId};
use fednorm_core::NormKind;

pub const DATA_DIR_ENV: &str = "FEDNORM_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => bail!("unknown precision {other:?}; valid: f32, f64"),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    SyntheticCifar,
    SyntheticMnist,
}

impl DatasetKind {
    pub const NAMES: &'static [&'static str] = &["cifar10", "mnist", "synthetic-cifar", "synthetic-mnist"];

    pub fn is_synthetic(self) -> bool {
        matches!(self, Self::SyntheticCifar | Self::SyntheticMnist)
    }
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "mnist" => Ok(Self::Mnist),
            "synthetic-cifar" => Ok(Self::SyntheticCifar),
            "synthetic-mnist" => Ok(Self::SyntheticMnist),
            other => bail!("unknown dataset {other:?}; valid: {}", Self::NAMES.join(", ")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cifar10 => "cifar10",
            Self::Mnist => "mnist",
            Self::SyntheticCifar => "synthetic-cifar",
            Self::SyntheticMnist => "synthetic-mnist",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub fed: FedConfig,
    pub precision: Precision,
    pub dataset: DatasetKind,
    /// Directory of the real dataset files; falls back to `FEDNORM_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Image side of synthetic data; 32 for CIFAR-like, 28 for MNIST-like when unset.
    pub synthetic_side: Option<usize>,
    /// Training images per class; when unset, exactly what the partition needs.
    pub synthetic_train_per_class: Option<usize>,
    pub synthetic_test_per_class: usize,
    pub synthetic_seed: u64,
    pub classes_per_device: usize,
    pub samples_per_class: usize,
    pub output_dir: PathBuf,
    /// Training images drawn for the toy shift experiment.
    pub toy_samples: usize,
    /// `toy.seed` mirrors `fed.seed`; `toy.probe_size` is the `probe_size` key.
    pub toy: ToyShiftConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FedConfig::default();
        Self {
            toy: ToyShiftConfig {
                seed: fed.seed,
                ..ToyShiftConfig::default()
            },
            fed,
            precision: Precision::F64,
            dataset: DatasetKind::Cifar10,
            data_dir: None,
            synthetic_side: None,
            synthetic_train_per_class: None,
            synthetic_test_per_class: 100,
            synthetic_seed: 0,
            classes_per_device: 2,
            samples_per_class: 100,
            output_dir: PathBuf::from("fednorm-out"),
            toy_samples: 1000,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| anyhow!("invalid value {raw:?} for {key}: {e}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut groups = None;
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {line:?}", n + 1))?;
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key {key}", n + 1);
            }
            c.set(key, raw, &mut groups).with_context(|| format!("line {}", n + 1))?;
        }
        if let Some(g) = groups {
            match c.fed.norm_kind {
                NormKind::Group(_) => c.fed.norm_kind = NormKind::Group(g),
                other => bail!("groups only applies to norm = group, not {other}"),
            }
        }
        c.toy.seed = c.fed.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    fn set(&mut self, key: &str, raw: &str, groups: &mut Option<usize>) -> Result<()> {
        let f = &mut self.fed;
        match key {
            "num_devices" => f.num_devices = value(key, raw)?,
            "devices_per_round" => f.devices_per_round = value(key, raw)?,
            "local_epochs" => f.local_epochs = value(key, raw)?,
            "batch_size" => f.batch_size = value(key, raw)?,
            "learning_rate" => f.learning_rate = value(key, raw)?,
            "total_rounds" => f.total_rounds = value(key, raw)?,
            "norm" => f.norm_kind = raw.parse::<NormKind>().map_err(|e| anyhow!("{e}"))?,
            "groups" => *groups = Some(value(key, raw)?),
            "norm_epsilon" => f.norm.epsilon = value(key, raw)?,
            "norm_momentum" => f.norm.momentum = value(key, raw)?,
            "model" => f.model = raw.parse::<ModelId>().map_err(|e| anyhow!("{e}"))?,
            "seed" => f.seed = value(key, raw)?,
            "eval_every" => f.eval_every = value(key, raw)?,
            "threads" => f.threads = value(key, raw)?,
            "record_wall_clock" => f.record_wall_clock = value(key, raw)?,
            "precision" => self.precision = raw.parse()?,
            "dataset" => self.dataset = raw.parse()?,
            "data_dir" => self.data_dir = Some(PathBuf::from(raw)),
            "synthetic_side" => self.synthetic_side = Some(value(key, raw)?),
            "synthetic_train_per_class" => self.synthetic_train_per_class = Some(value(key, raw)?),
            "synthetic_test_per_class" => self.synthetic_test_per_class = value(key, raw)?,
            "synthetic_seed" => self.synthetic_seed = value(key, raw)?,
            "classes_per_device" => self.classes_per_device = value(key, raw)?,
            "samples_per_class" => self.samples_per_class = value(key, raw)?,
            "output_dir" => self.output_dir = PathBuf::from(raw),
            "probe_size" => self.toy.probe_size = value(key, raw)?,
            "toy_samples" => self.toy_samples = value(key, raw)?,
            "toy_delta" => self.toy.delta = value(key, raw)?,
            "toy_steps" => self.toy.steps = value(key, raw)?,
            "toy_batch_size" => self.toy.batch_size = value(key, raw)?,
            "toy_learning_rate" => self.toy.learning_rate = value(key, raw)?,
            "toy_padding" => self.toy.padding = value(key, raw)?,
            "toy_shared_shuffle" => self.toy.shared_shuffle = value(key, raw)?,
            other => bail!("unknown key {other:?}; valid keys: {}", KEYS.join(", ")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        if self.classes_per_device == 0 || self.samples_per_class == 0 {
            bail!("classes_per_device and samples_per_class must be positive");
        }
        if self.synthetic_test_per_class == 0 || self.synthetic_train_per_class == Some(0) {
            bail!("synthetic per-class counts must be positive");
        }
        if self.toy_samples < 2 {
            bail!("toy_samples must be at least 2");
        }
        if !(self.toy.delta.is_finite() && self.toy.learning_rate > 0.0) {
            bail!("toy_delta must be finite and toy_learning_rate positive");
        }
        Ok(())
    }

    /// Explicit data directory, else `FEDNORM_DATA_DIR`.
    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    pub fn resolved_synthetic_side(&self) -> usize {
        self.synthetic_side.unwrap_or(match self.dataset {
            DatasetKind::SyntheticMnist | DatasetKind::Mnist => 28,
            _ => 32,
        })
    }

    /// Enough samples per class for the partition, assuming ten classes.
    pub fn resolved_train_per_class(&self) -> usize {
        self.synthetic_train_per_class.unwrap_or_else(|| {
            (self.fed.num_devices * self.classes_per_device * self.samples_per_class).div_ceil(10)
        })
    }

    /// Every key with its effective value; parsing the result reproduces
    /// this configuration (with data_dir and the synthetic sizes pinned).
    pub fn to_resolved_text(&self) -> String {
        let f = &self.fed;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_devices", &f.num_devices);
        kv("devices_per_round", &f.devices_per_round);
        kv("local_epochs", &f.local_epochs);
        kv("batch_size", &f.batch_size);
        kv("learning_rate", &f.learning_rate);
        kv("total_rounds", &f.total_rounds);
        kv("norm", &f.norm_kind);
        kv("norm_epsilon", &f.norm.epsilon);
        kv("norm_momentum", &f.norm.momentum);
        kv("model", &f.model);
        kv("seed", &f.seed);
        kv("eval_every", &f.eval_every);
        kv("threads", &f.threads);
        kv("record_wall_clock", &f.record_wall_clock);
        kv("precision", &self.precision);
        kv("dataset", &self.dataset);
        if let Some(dir) = self.resolved_data_dir() {
            kv("data_dir", &dir.display());
        }
        if self.dataset.is_synthetic() {
            kv("synthetic_side", &self.resolved_synthetic_side());
            kv("synthetic_train_per_class", &self.resolved_train_per_class());
        }
        kv("synthetic_test_per_class", &self.synthetic_test_per_class);
        kv("synthetic_seed", &self.synthetic_seed);
        kv("classes_per_device", &self.classes_per_device);
        kv("samples_per_class", &self.samples_per_class);
        kv("output_dir", &self.output_dir.display());
        kv("probe_size", &self.toy.probe_size);
        kv("toy_samples", &self.toy_samples);
        kv("toy_delta", &self.toy.delta);
        kv("toy_steps", &self.toy.steps);
        kv("toy_batch_size", &self.toy.batch_size);
        kv("toy_learning_rate", &self.toy.learning_rate);
        kv("toy_padding", &self.toy.padding);
        kv("toy_shared_shuffle", &self.toy.shared_shuffle);
        s
    }
}

pub const KEYS: &[&str] = &[
    "num_devices",
    "devices_per_round",
    "local_epochs",
    "batch_size",
    "learning_rate",
    "total_rounds",
    "norm",
    "groups",
    "norm_epsilon",
    "norm_momentum",
    "model",
    "seed",
    "eval_every",
    "threads",
    "record_wall_clock",
    "precision",
    "dataset",
    "data_dir",
    "synthetic_side",
    "synthetic_train_per_class",
    "synthetic_test_per_class",
    "synthetic_seed",
    "classes_per_device",
    "samples_per_class",
    "output_dir",
    "probe_size",
    "toy_samples",
    "toy_delta",
    "toy_steps",
    "toy_batch_size",
    "toy_learning_rate",
    "toy_padding",
    "toy_shared_shuffle",
];
