//! Run configuration: one JSON document binding the audio, model, and
//! training sections plus paths and the seed.
//!
//! Unknown keys are rejected everywhere, missing keys take the documented
//! defaults, and every command that produces an output directory writes the
//! fully resolved document back there for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::AudioConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    /// Master seed; when set it overrides `train.seed` during resolution.
    pub seed: Option<u64>,
    /// Sample rate assumed when reading feature files and alignments
    /// (waveforms carry their own).
    pub sample_rate_hz: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            audio: AudioConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            seed: None,
            sample_rate_hz: 24_000,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Apply the master seed and validate every section.
    pub fn resolve(mut self) -> Result<RunConfig> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate(self.sample_rate_hz)?;
        self.model.validate()?;
        self.train.validate()?;
        if self.audio.n_mels != self.model.n_mels {
            return Err(Error::Config(format!(
                "audio.n_mels {} disagrees with model.n_mels {}",
                self.audio.n_mels, self.model.n_mels
            )));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hop_samples(&self) -> usize {
        self.audio.hop_samples(self.sample_rate_hz)
    }

    /// Write the resolved document into an output directory.
    pub fn echo_into(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join("config.resolved.json");
        std::fs::write(&path, self.to_json_pretty()).map_err(|e| Error::io(&path, e))
    }
}
