//! Run configuration files (TOML).
//!
//! Only `constraint.beta` is required; every other key has a default, and the
//! fully materialized configuration can be written back with
//! [`RunConfig::to_toml`]. Unknown keys are rejected.

use std::env;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::idx::load_idx;
use super::synthetic::{gaussian_blobs, two_moons};
use crate::alloc::ResourceConstraint;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::qat::{AllocatorKind, ModelSpec, TrainConfig};
use crate::quant::QuantMode;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "MPQ_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "mpq-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 8, 64],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub phase1_fraction: f64,
    pub realloc_period: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub sensitivity_period: usize,
    pub mode: QuantMode,
    pub allocator: AllocatorKind,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain_iterations: usize,
    pub calibration_batches: usize,
    pub separate_probe_batch: bool,
    pub log_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::new(ResourceConstraint::AvgBitwidth {
            beta: 4.0,
            b_min: 2,
            b_max: 8,
        });
        Self {
            iterations: d.iterations,
            phase1_fraction: d.phase1_fraction,
            realloc_period: d.realloc_period,
            lr: d.lr,
            momentum: d.momentum,
            alpha_lr: d.alpha_lr,
            gamma: d.gamma,
            sensitivity_period: d.sensitivity_period,
            mode: d.mode,
            allocator: d.allocator,
            batch_size: d.batch_size,
            seed: d.seed,
            pretrain_iterations: d.pretrain_iterations,
            calibration_batches: d.calibration_batches,
            separate_probe_batch: d.separate_probe_batch,
            log_interval: d.log_interval,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    #[default]
    AvgBitwidth,
    PerElementAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(default)]
    pub kind: ConstraintKind,
    /// Average bitwidth target; the weight target for `per-element-avg`.
    pub beta: f64,
    /// Activation target for `per-element-avg`; defaults to `beta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_act: Option<f64>,
    #[serde(default = "default_b_min")]
    pub b_min: u32,
    #[serde(default = "default_b_max")]
    pub b_max: u32,
}

fn default_b_min() -> u32 {
    2
}

fn default_b_max() -> u32 {
    8
}

impl ConstraintSection {
    pub fn resolve(&self) -> Result<ResourceConstraint> {
        if self.b_min < 1 || self.b_min > self.b_max {
            return Err(Error::config(
                "constraint.b_min",
                format!(
                    "must be positive and at most constraint.b_max = {}",
                    self.b_max
                ),
            ));
        }
        let targets = [
            ("constraint.beta", Some(self.beta)),
            ("constraint.beta_act", self.beta_act),
        ];
        for (key, value) in targets {
            let Some(beta) = value else { continue };
            if !(beta >= self.b_min as f64) {
                return Err(Error::config(
                    key,
                    format!("{beta} is below constraint.b_min = {}", self.b_min),
                ));
            }
            if !(beta <= self.b_max as f64) {
                return Err(Error::config(
                    key,
                    format!("{beta} is above constraint.b_max = {}", self.b_max),
                ));
            }
        }
        match self.kind {
            ConstraintKind::AvgBitwidth => {
                if self.beta_act.is_some() {
                    return Err(Error::config(
                        "constraint.beta_act",
                        "only meaningful with kind = \"per-element-avg\"",
                    ));
                }
                ResourceConstraint::avg(self.beta, self.b_min, self.b_max)
            }
            ConstraintKind::PerElementAvg => ResourceConstraint::per_element(
                self.beta,
                self.beta_act.unwrap_or(self.beta),
                self.b_min,
                self.b_max,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    TwoMoons {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    GaussianBlobs {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default = "default_centers")]
        centers: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_n_train() -> usize {
    1024
}

fn default_n_test() -> usize {
    1024
}

fn default_noise() -> f64 {
    0.15
}

fn default_centers() -> usize {
    3
}

fn default_spread() -> f64 {
    0.5
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::TwoMoons {
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise: default_noise(),
            seed: 0,
        }
    }
}

impl DataSection {
    /// Loads or generates the data. Synthetic test sets use the next seed.
    /// Relative IDX paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Split> {
        match self {
            DataSection::TwoMoons {
                n_train,
                n_test,
                noise,
                seed,
            } => Ok(Split {
                train: two_moons(*n_train, *noise, *seed)?,
                test: two_moons(*n_test, *noise, seed.wrapping_add(1))?,
            }),
            DataSection::GaussianBlobs {
                n_train,
                n_test,
                centers,
                spread,
                seed,
            } => Ok(Split {
                train: gaussian_blobs(*n_train, *centers, *spread, *seed)?,
                test: gaussian_blobs(*n_test, *centers, *spread, seed.wrapping_add(1))?,
            }),
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = load_idx(&base.join(train_images), &base.join(train_labels))?;
                let mut test = load_idx(&base.join(test_images), &base.join(test_labels))?;
                let classes = train.classes.max(test.classes);
                train.classes = classes;
                test.classes = classes;
                Ok(Split { train, test })
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Defaults to `$MPQ_OUTPUT_DIR`, then `mpq-out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// A parsed configuration file with all defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub constraint: ConstraintSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." {
                "<document>".to_string()
            } else {
                path
            };
            Error::config(key, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.output.dir = Some(cfg.output_dir());
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config(
                "model.hidden",
                "need at least one positive hidden width",
            ));
        }
        self.train_config()?.validate()
    }

    pub fn constraint(&self) -> Result<ResourceConstraint> {
        self.constraint.resolve()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            iterations: t.iterations,
            phase1_fraction: t.phase1_fraction,
            realloc_period: t.realloc_period,
            lr: t.lr,
            momentum: t.momentum,
            alpha_lr: t.alpha_lr,
            gamma: t.gamma,
            sensitivity_period: t.sensitivity_period,
            mode: t.mode,
            constraint: self.constraint()?,
            allocator: t.allocator,
            batch_size: t.batch_size,
            seed: t.seed,
            pretrain_iterations: t.pretrain_iterations,
            calibration_batches: t.calibration_batches,
            separate_probe_batch: t.separate_probe_batch,
            log_interval: t.log_interval,
        })
    }

    /// Model for data with `dim` features and `classes` labels.
    pub fn model_spec(&self, dim: usize, classes: usize) -> ModelSpec {
        let mut widths = vec![dim];
        widths.extend_from_slice(&self.model.hidden);
        widths.push(classes.max(2));
        ModelSpec {
            widths,
            seed: self.model.seed,
        }
    }

    pub fn load_data(&self) -> Result<Split> {
        self.data.load(&self.base_dir)
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output.dir {
            Some(dir) => self.base_dir.join(dir),
            None => env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR)),
        }
    }

    /// The effective configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<document>", e.to_string()))
    }
}
