//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::AgentConfig;
use crate::error::{Error, Result};
use crate::primitives::canonical_digest;
use crate::providers::simulated::SimulatedTransport;
use crate::providers::{
    CacheMode, DenyTransport, HttpTransport, ModelSet, Providers, ResponseCache, RetryPolicy, Transport,
};
use crate::vision::ToolDefaults;

/// Base URL that routes every request to the built-in offline model.
pub const SIMULATED_BASE_URL: &str = "simulated://";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: String,
    /// Environment variable holding the API key; `None` sends no auth header.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub retry_base_delay_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 120,
            max_attempts: 3,
            retry_base_delay_ms: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Retrieval threshold on image-embedding cosine similarity.
    pub gamma: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { gamma: 0.80 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub workers: usize,
    pub seed: u64,
    pub cache_dir: PathBuf,
    pub cache_mode: CacheMode,
    pub out_dir: PathBuf,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            workers: 4,
            seed: 17,
            cache_dir: "cache".into(),
            cache_mode: CacheMode::Record,
            out_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub provider: ProviderConfig,
    pub models: ModelSet,
    pub agent: AgentConfig,
    pub memory: MemoryConfig,
    pub run: RunSettings,
    pub tools: ToolDefaults,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        let gamma = self.memory.gamma;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("memory.gamma must be in (0, 1), got {gamma}")));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        if self.provider.max_attempts == 0 {
            return Err(Error::Config("provider.max_attempts must be at least 1".into()));
        }
        if self.provider.base_url.trim().is_empty() {
            return Err(Error::Config("provider.base_url is empty".into()));
        }
        let m = &self.models;
        if [&m.primary, &m.auxiliary, &m.text_embedding, &m.image_embedding]
            .iter()
            .any(|s| s.trim().is_empty())
        {
            return Err(Error::Config("every model id must be set".into()));
        }
        Ok(())
    }

    /// Digest of every setting that changes model inputs, used to tell whether
    /// persisted memory banks are still valid.
    pub fn behaviour_digest(&self) -> Result<String> {
        canonical_digest(&json!({
            "models": self.models,
            "agent": self.agent,
            "gamma": self.memory.gamma,
            "tools": self.tools,
        }))
    }

    fn transport(&self, mode: CacheMode) -> Result<Arc<dyn Transport>> {
        if mode == CacheMode::ReplayStrict {
            return Ok(Arc::new(DenyTransport));
        }
        if self.provider.base_url == SIMULATED_BASE_URL {
            return Ok(Arc::new(SimulatedTransport));
        }
        let key = match &self.provider.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?)
            }
            None => None,
        };
        Ok(Arc::new(HttpTransport::new(
            self.provider.base_url.clone(),
            key,
            Duration::from_secs(self.provider.timeout_secs),
        )))
    }

    /// Provider stack for `mode`. Replay-strict never reaches a network.
    pub fn providers(&self, mode: CacheMode) -> Result<Providers> {
        let cache = (mode != CacheMode::Passthrough).then(|| Arc::new(ResponseCache::new(&self.run.cache_dir, mode)));
        let retry = RetryPolicy {
            max_attempts: self.provider.max_attempts,
            base_delay: Duration::from_millis(self.provider.retry_base_delay_ms),
        };
        Ok(Providers::over_transport(
            self.transport(mode)?,
            cache,
            self.models.clone(),
            retry,
        ))
    }
}
