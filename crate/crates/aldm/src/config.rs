//! Training configuration: sectioned key/value config files, validation and
//! the config hash stamped onto every artifact.

use crate::error::{AldmError, Result};
use crate::nets::Conditioning;
use crate::schedule::ScheduleKind;
use crate::unroll::UnrollConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Adv,
    AdvUnroll,
    FrozenSegmenter,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Baseline => "baseline",
            Mode::Adv => "adv",
            Mode::AdvUnroll => "adv_unroll",
            Mode::FrozenSegmenter => "frozen_segmenter",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Mode {
    type Err = AldmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "adv" => Ok(Mode::Adv),
            "adv_unroll" => Ok(Mode::AdvUnroll),
            "frozen_segmenter" => Ok(Mode::FrozenSegmenter),
            other => Err(AldmError::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

fn default_lambda_adv() -> f64 {
    0.1
}
fn default_lr_generator() -> f64 {
    1e-5
}
fn default_lr_discriminator() -> f64 {
    1e-6
}
fn default_batch_size() -> usize {
    8
}
fn default_warmup_iters() -> usize {
    5000
}
fn default_eval_every() -> usize {
    0
}
fn default_seed() -> u64 {
    0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSection {
    pub mode: Mode,
    pub total_iters: usize,
    #[serde(default = "default_lambda_adv")]
    pub lambda_adv: f64,
    #[serde(default = "default_lr_generator")]
    pub lr_generator: f64,
    #[serde(default = "default_lr_discriminator")]
    pub lr_discriminator: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_warmup_iters")]
    pub warmup_iters: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// 0 disables periodic evaluation snapshots.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Exponential moving average of generator weights (off by default).
    #[serde(default)]
    pub ema: bool,
    /// Freshly sample (t, eps) for the discriminator step instead of
    /// reusing the generator step's estimates.
    #[serde(default = "default_true")]
    pub fresh_fake_sample: bool,
}

fn default_base_width() -> usize {
    8
}
fn default_depth() -> usize {
    2
}
fn default_disc_base_width() -> usize {
    8
}
fn default_t_max() -> usize {
    1000
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn default_sample_steps() -> usize {
    25
}
fn default_conditioning() -> Conditioning {
    Conditioning::Concat
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSection {
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_conditioning")]
    pub conditioning: Conditioning,
    #[serde(default = "default_disc_base_width")]
    pub disc_base_width: usize,
    #[serde(default = "default_depth")]
    pub disc_depth: usize,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    /// DDIM sampling steps used for evaluation-time generation.
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            base_width: default_base_width(),
            depth: default_depth(),
            conditioning: default_conditioning(),
            disc_base_width: default_disc_base_width(),
            disc_depth: default_depth(),
            t_max: default_t_max(),
            schedule: default_schedule(),
            sample_steps: default_sample_steps(),
        }
    }
}

fn default_eval_layouts() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataSection {
    pub dataset: PathBuf,
    /// Number of validation layouts used for metric computation.
    #[serde(default = "default_eval_layouts")]
    pub eval_layouts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub train: TrainSection,
    #[serde(default)]
    pub unroll: UnrollConfig,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s)
            .map_err(|e| AldmError::Config { field: "<root>".into(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| AldmError::Config {
            field: "<file>".into(),
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| {
            Err(AldmError::Config { field: field.into(), msg: msg.into() })
        };
        if self.train.lr_generator <= 0.0 {
            return err("train.lr_generator", "must be > 0");
        }
        if self.train.lr_discriminator <= 0.0 {
            return err("train.lr_discriminator", "must be > 0");
        }
        if self.train.lambda_adv < 0.0 {
            return err("train.lambda_adv", "must be >= 0");
        }
        if self.train.batch_size == 0 {
            return err("train.batch_size", "must be >= 1");
        }
        if self.train.warmup_iters > self.train.total_iters {
            return err("train.warmup_iters", "must be <= total_iters");
        }
        if self.model.base_width < 8 {
            return err("model.base_width", "must be >= 8");
        }
        if self.model.depth < 2 {
            return err("model.depth", "must be >= 2");
        }
        if self.model.t_max == 0 {
            return err("model.t_max", "must be >= 1");
        }
        if self.model.sample_steps == 0 || self.model.sample_steps > self.model.t_max {
            return err("model.sample_steps", "must be in 1..=t_max");
        }
        self.unroll
            .validate()
            .map_err(|e| AldmError::Config { field: "unroll".into(), msg: e.to_string() })?;
        Ok(())
    }

    /// Stable hash over the effective configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    /// Serialize the effective config back to TOML (frozen copy beside outputs).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
