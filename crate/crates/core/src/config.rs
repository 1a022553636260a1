//! Service configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, StoreConfig};
use crate::model::{AttentionKernel, ModelConfig};
use crate::orchestrator::{OrchestratorConfig, ProfileSet};
use crate::staging::BandwidthTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen_addr")]
    pub listen_addr: String,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub attention: AttentionKernel,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub store: StoreConfig,
    #[serde(default)]
    pub bandwidth: BandwidthTable,
    /// Pinned memory and a single packed transfer when set; pageable memory
    /// and one transfer per input array otherwise.
    #[serde(default = "default_mem_opt")]
    pub mem_opt: bool,
    #[serde(default)]
    pub orchestrator: OrchestratorConfig,
    /// Weights file; weights are drawn from `model.seed` when absent.
    #[serde(default)]
    pub params_path: Option<PathBuf>,
}

fn default_listen_addr() -> String {
    "127.0.0.1:8080".into()
}

fn default_max_concurrency() -> usize {
    64
}

fn default_mem_opt() -> bool {
    true
}

impl ServiceConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            listen_addr: default_listen_addr(),
            max_concurrency: default_max_concurrency(),
            model,
            attention: AttentionKernel::default(),
            cache: CacheConfig::default(),
            store: StoreConfig::default(),
            bandwidth: BandwidthTable::default(),
            mem_opt: true,
            orchestrator: OrchestratorConfig::default(),
            params_path: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config = Self::from_json(&text)?;
        if let Some(p) = &config.params_path {
            if p.is_relative() {
                config.params_path = Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.cache.validate().map_err(|e| invalid(e.to_string()))?;
        self.bandwidth.validate().map_err(invalid)?;
        if self.max_concurrency == 0 {
            return Err(invalid("max_concurrency must be positive".into()));
        }
        if let AttentionKernel::Tiled { tile: 0 } = self.attention {
            return Err(invalid("attention tile must be positive".into()));
        }
        let profiles = self.profiles()?;
        if profiles.max_shape() > self.model.max_candidates {
            return Err(invalid(format!(
                "profile shape {} exceeds model.max_candidates {}",
                profiles.max_shape(),
                self.model.max_candidates
            )));
        }
        if self.store.bytes_per_value < self.model.hidden_dim * 8 {
            return Err(invalid(format!(
                "store.bytes_per_value {} cannot hold a {}-wide embedding",
                self.store.bytes_per_value, self.model.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn profiles(&self) -> Result<ProfileSet, ConfigError> {
        ProfileSet::new(self.orchestrator.profile_shapes.clone(), self.orchestrator.executors_per_shape)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
