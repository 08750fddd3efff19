//! Session configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Script, ScriptError};
use crate::interleave::AUDIO_FEATURE_PERIOD_MS;
use crate::orchestrator::ComputeModel;
use crate::sink::PunctuationSet;
use crate::vad::VadConfig;
use crate::vision::{SamplerConfig, TokenBudget, VisionError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkConfig {
    pub punctuation: PunctuationSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Encode sparse chunks as soon as their two packets arrive. When off,
    /// they are encoded when the next user turn starts.
    pub eager_sparse_encode: bool,
    /// Spacing of the audio ids in the token stream: 80 for encoder
    /// features (12.5 Hz), 60 to approximate discrete codec tokens (16.67 Hz).
    pub audio_feature_period_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eager_sparse_encode: true,
            audio_feature_period_ms: AUDIO_FEATURE_PERIOD_MS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    /// Response script, one line per turn. Relative paths resolve against
    /// the config file's directory. Absent means the built-in script.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    pub vad: VadConfig,
    pub sampler: SamplerConfig,
    pub budget: TokenBudget,
    pub compute: ComputeModel,
    pub sink: SinkConfig,
    pub pipeline: PipelineConfig,
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(script) = &cfg.script {
            if script.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.script = Some(base.join(script));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sampler.validate()?;
        self.budget.validate()?;
        if self.pipeline.audio_feature_period_ms == 0 {
            return Err(ConfigError::Invalid("pipeline.audio_feature_period_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn load_script(&self) -> Result<Script, ConfigError> {
        Ok(match &self.script {
            Some(path) => Script::load(path)?,
            None => Script::default(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
