//! Run configuration: one JSON document covering data paths, model sizes
//! and training schedules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::JointConfig;
use crate::pruner::PrunerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub pruner_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Precomputed hidden states; replaces the trainable encoders.
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Context window size in tokens.
    pub window: usize,
    pub encoder: EncoderConfig,
    pub pruner: PrunerConfig,
    pub joint: JointConfig,
    pub pruner_train: TrainConfig,
    pub joint_train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            schema: None,
            pruner_checkpoint: None,
            checkpoint: None,
            embeddings: None,
            out: PathBuf::from("out"),
            seed: 13,
            window: 64,
            encoder: EncoderConfig::default(),
            pruner: PrunerConfig::default(),
            joint: JointConfig::default(),
            pruner_train: TrainConfig::default(),
            joint_train: TrainConfig::default(),
        }
    }
}

fn check_file(what: &str, p: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        if !p.is_file() {
            return Err(Error::Config(format!("{what} {} does not exist", p.display())));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks value ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if self.embeddings.is_none() {
            self.encoder.validate()?;
            if self.window + 2 > self.encoder.max_positions {
                return Err(Error::Config(format!(
                    "window {} plus solid markers exceeds max_positions {}",
                    self.window, self.encoder.max_positions
                )));
            }
        }
        self.pruner.validate()?;
        if self.joint.d_repr == 0 {
            return Err(Error::Config("joint.d_repr must be positive".into()));
        }
        for (what, t) in [("pruner_train", &self.pruner_train), ("joint_train", &self.joint_train)] {
            if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..=1.0).contains(&t.warmup_ratio) {
                return Err(Error::Config(format!("{what}: lr must be positive and warmup_ratio in [0, 1]")));
            }
        }
        check_file("train corpus", &self.train)?;
        check_file("dev corpus", &self.dev)?;
        check_file("test corpus", &self.test)?;
        check_file("schema", &self.schema)?;
        check_file("embedding store", &self.embeddings)?;
        Ok(())
    }
}
