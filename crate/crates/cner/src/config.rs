//! Run configuration file: one TOML document covering data source, schedule,
//! model size, training hyper-parameters, and output location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionMode;
use crate::train::{EtaScope, MethodVariant, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Column-format corpus files on disk.
    Conll,
    /// Seeded synthetic generation (bundled spec unless `synth_spec` given).
    Synth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synth_spec: Option<PathBuf>,
    #[serde(default = "default_mentions_train")]
    pub synth_mentions_train: usize,
    #[serde(default = "default_mentions_dev")]
    pub synth_mentions_dev: usize,
    #[serde(default = "default_mentions_test")]
    pub synth_mentions_test: usize,
    /// Seed for slicing and synthetic generation.
    #[serde(default)]
    pub seed: u64,
}

fn default_mentions_train() -> usize {
    60
}
fn default_mentions_dev() -> usize {
    20
}
fn default_mentions_test() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub fg: usize,
    pub pg: usize,
    /// When set, entity types are learned in a seeded random order instead
    /// of alphabetically.
    pub order_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: 32,
            attention_mode: AttentionMode::PreSoftmax,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub method: String,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pg1: usize,
    pub epochs_pgn: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eta_scope: EtaScope,
    pub fisher_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: "spt".into(),
            lambda: 2.0,
            lr: 1e-3,
            batch_size: 8,
            epochs_pg1: 10,
            epochs_pgn: 20,
            optimizer: OptimizerKind::Adam,
            seed: 42,
            eta_scope: EtaScope::Batch,
            fisher_cap: crate::fusion::FISHER_SAMPLE_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("bad config: {e}")]))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(vec![format!("cannot read config {}: {e}", path.display())])
        })?;
        Self::from_toml_str(&text)
    }

    /// Collects every problem at once so a bad config fails with the full
    /// list instead of one error per invocation.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.data.source {
            DataSource::Conll => {
                for (field, value) in [
                    ("data.train", &self.data.train),
                    ("data.dev", &self.data.dev),
                    ("data.test", &self.data.test),
                ] {
                    if value.is_none() {
                        problems.push(format!("{field} is required for source = \"conll\""));
                    }
                }
            }
            DataSource::Synth => {
                if self.data.synth_mentions_train == 0 {
                    problems.push("data.synth_mentions_train must be >= 1".into());
                }
            }
        }
        if self.schedule.fg < 1 || self.schedule.pg < 1 {
            problems.push(format!(
                "schedule.fg and schedule.pg must be >= 1, got fg={} pg={}",
                self.schedule.fg, self.schedule.pg
            ));
        }
        if self.model.d_model == 0 || self.model.n_heads == 0 {
            problems.push("model.d_model and model.n_heads must be >= 1".into());
        } else if self.model.d_model % self.model.n_heads != 0 {
            problems.push(format!(
                "model.d_model {} must be divisible by model.n_heads {}",
                self.model.d_model, self.model.n_heads
            ));
        }
        if let Err(e) = MethodVariant::from_name(&self.train.method) {
            problems.push(e.to_string());
        }
        problems.extend(self.to_train_config().map(|c| c.validate()).unwrap_or_default());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_train_config(&self) -> Result<crate::train::TrainConfig> {
        Ok(crate::train::TrainConfig {
            lambda: self.train.lambda,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            epochs_pg1: self.train.epochs_pg1,
            epochs_pgn: self.train.epochs_pgn,
            optimizer: self.train.optimizer,
            seed: self.train.seed,
            method: MethodVariant::from_name(&self.train.method)?,
            eta_scope: self.train.eta_scope,
            fisher_cap: self.train.fisher_cap,
        })
    }
}
