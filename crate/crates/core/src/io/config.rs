//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::closed_loop::EpisodeConfig;
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::policy::HighPolicyDims;
use crate::realizer::RealizerDims;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    pub high: Option<PathBuf>,
    pub low: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub episode: EpisodeConfig,
    pub expert: ExpertConfig,
    pub train: TrainConfig,
    pub realizer: RealizerDims,
    pub policy: HighPolicyDims,
    /// Initial seed for parameter initialization.
    pub init_seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub checkpoints: CheckpointPaths,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads a config file and resolves its checkpoint paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.checkpoints.high, &mut c.checkpoints.low].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::Resolution {
                    kind: "checkpoint",
                    name: p.display().to_string(),
                });
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.realizer.validate()?;
        if self.policy.hidden == 0 {
            return Err(Error::InvalidInput("policy hidden width must be >= 1".into()));
        }
        let l = &self.train.loss;
        if !(l.lambda_smooth >= 0.0 && l.lambda_coll >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}
