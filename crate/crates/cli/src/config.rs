//! Run configuration: a JSON file, then `PROTOPARTS_*` environment
//! variables, then command-line flags, each layer overriding the last.
//! Environment and flag handling come from clap; this module owns the file
//! layer and the resolved snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use protoparts::harness::TrainConfig;
use protoparts::model::ModelConfig;
use protoparts::skeleton::PreprocessConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// NTU RGB+D 120 one-shot: 20 fixed novel classes.
    Ntu120,
    /// NW-UCLA: odd classes train, even classes evaluate.
    Nwucla,
    /// The last `holdout_classes` labels evaluate.
    Holdout,
    /// Class lists given in the config.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub training_class_count: usize,
    pub holdout_classes: usize,
    pub train_classes: Vec<String>,
    pub eval_classes: Vec<String>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Holdout,
            training_class_count: 100,
            holdout_classes: 5,
            train_classes: Vec::new(),
            eval_classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub exemplar_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and episode sampling.
    pub seed: u64,
    pub workers: usize,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// The file layer; defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::user(format!("config {}: {e}", path.display())))
    }

    /// Copies the shared settings into the sections that consume them.
    ///
    /// Decay epochs at or past the epoch count can never fire; they are
    /// dropped (with a warning) so that short runs such as `--epochs 1`
    /// stay valid under the default schedule.
    pub fn finish(&mut self) {
        self.train.seed = self.seed;
        self.train.workers = self.workers;
        let epochs = self.train.epochs;
        let before = self.train.decay_epochs.len();
        self.train.decay_epochs.retain(|&e| e < epochs);
        if self.train.decay_epochs.len() != before {
            log::warn!("dropping decay epochs at or beyond epoch count {epochs}");
        }
    }

    /// Every field-level problem, prefixed with its section.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if self.workers == 0 {
            problems.push("workers: must be at least 1".to_string());
        }
        if let Err(e) = self.model.validate() {
            problems.push(format!("model: {e}"));
        }
        if let Err(protoparts::harness::TrainError::Config(list)) = self.train.validate() {
            problems.extend(list.into_iter().map(|p| format!("train: {p}")));
        }
        if self.preprocess.target_frames == 0 {
            problems.push("preprocess: target_frames must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::user(format!(
                "invalid configuration:\n  {}",
                problems.join("\n  ")
            )))
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_json()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
