//! Run configuration: one JSON document with a section per stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Every section is optional and falls back to its defaults; unknown keys
/// at any level are rejected. The top-level `seed` seeds every randomized
/// stage: [`RunConfig::resolved`] copies it into each section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub curation: CurationConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed into every section that draws random numbers.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.curation.validate()?;
        self.synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
