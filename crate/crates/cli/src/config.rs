use std::path::{Path, PathBuf};

use fusex_core::fusion::FusionMethod;
use fusex_core::objective::ObjectiveConfig;
use fusex_core::selector::SelectionConfig;
use fusex_core::synthbench::BenchConfig;
use fusex_core::trainer::{AdamWConfig, TrainConfig};
use fusex_core::LmDims;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_lr: t.max_lr,
            warmup_ratio: t.warmup_ratio,
            steps: t.steps,
            batch_size: t.batch_size,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

/// Everything one experiment needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Benchmark manifest used by `train`, `eval` and `ablate`.
    pub manifest: Option<PathBuf>,
    pub fusion: FusionMethod,
    pub train: TrainSection,
    pub lm: LmDims,
    pub optimizer: AdamWConfig,
    pub objective: ObjectiveConfig,
    pub selection: SelectionConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            manifest: None,
            fusion: FusionMethod::Weighted,
            train: TrainSection::default(),
            lm: LmDims::default(),
            optimizer: AdamWConfig::default(),
            objective: ObjectiveConfig::default(),
            selection: SelectionConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_lr: self.train.max_lr,
            warmup_ratio: self.train.warmup_ratio,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            lm: self.lm,
            optimizer: self.optimizer,
            objective: self.objective.clone(),
            selection: self.selection.clone(),
            fusion: self.fusion,
        }
    }

    /// Checks every section before anything touches the disk.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate()?;
        self.bench.validate()?;
        if self.lm.vocab != self.bench.vocab {
            return Err(CliError::Config(format!(
                "lm.vocab = {} but bench.vocab = {}",
                self.lm.vocab, self.bench.vocab
            )));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Config("no benchmark manifest configured (set `manifest` or pass --manifest)".into()))
    }
}
