//! On-disk record/replay cache for provider responses.
//!
//! Entries live at `<cache_dir>/<first two hex chars>/<key>.json`. The key is the
//! canonical digest of the request with image bytes replaced by their SHA-256,
//! so a run recorded once can be replayed offline and reproduce the same
//! responses for the same requests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::types::{ChatRequest, ChatResponse, ImagePart};
use super::{ChatBackend, EmbeddingBackend, ProviderError};
use crate::primitives::{canonical_digest, Embedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Serve hits from disk, call upstream on a miss and persist the result.
    Record,
    /// Serve from disk only; a miss is an error and upstream is never touched.
    ReplayStrict,
    /// No caching at all.
    Passthrough,
}

impl FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(CacheMode::Record),
            "replay-strict" => Ok(CacheMode::ReplayStrict),
            "passthrough" => Ok(CacheMode::Passthrough),
            other => Err(format!(
                "unknown cache mode `{other}` (record|replay-strict|passthrough)"
            )),
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheMode::Record => "record",
            CacheMode::ReplayStrict => "replay-strict",
            CacheMode::Passthrough => "passthrough",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub response: Value,
    pub created_at: DateTime<Utc>,
}

pub struct ResponseCache {
    dir: PathBuf,
    mode: CacheMode,
    locks: DashMap<String, Arc<Mutex<()>>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>, mode: CacheMode) -> Self {
        Self {
            dir: dir.into(),
            mode,
            locks: DashMap::new(),
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("00");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, ProviderError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ProviderError::Cache(format!("corrupt cache entry {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    pub fn put(&self, key: &str, response: &Value) -> Result<(), ProviderError> {
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a shard directory");
        fs::create_dir_all(parent).map_err(|e| ProviderError::Cache(format!("{}: {e}", parent.display())))?;
        let entry = CacheEntry {
            request_digest: key.to_string(),
            response: response.clone(),
            created_at: Utc::now(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(|e| ProviderError::Cache(e.to_string()))?;
        // write-then-rename so readers only ever see complete entries
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| ProviderError::Cache(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, &path).map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))
    }

    /// Resolves one request under the configured mode.
    pub fn cached_call(
        &self,
        key: &str,
        upstream: impl FnOnce() -> Result<Value, ProviderError>,
    ) -> Result<Value, ProviderError> {
        match self.mode {
            CacheMode::Passthrough => upstream(),
            CacheMode::ReplayStrict => self
                .get(key)?
                .map(|e| e.response)
                .ok_or_else(|| ProviderError::CacheMiss {
                    digest: key.to_string(),
                }),
            CacheMode::Record => {
                if let Some(hit) = self.get(key)? {
                    return Ok(hit.response);
                }
                let lock = self.locks.entry(key.to_string()).or_default().clone();
                let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
                if let Some(hit) = self.get(key)? {
                    return Ok(hit.response);
                }
                let value = upstream()?;
                self.put(key, &value)?;
                Ok(value)
            }
        }
    }
}

/// Chat backend decorated with the response cache.
pub struct CachedChat {
    inner: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
}

impl CachedChat {
    pub fn new(inner: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }
}

impl ChatBackend for CachedChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let key = req.cache_key().map_err(|e| ProviderError::Cache(e.to_string()))?;
        let value = self.cache.cached_call(&key, || {
            let resp = self.inner.complete(req)?;
            serde_json::to_value(resp).map_err(|e| ProviderError::Cache(e.to_string()))
        })?;
        serde_json::from_value(value).map_err(|e| ProviderError::Cache(format!("entry {key}: {e}")))
    }
}

pub struct CachedEmbeddings {
    inner: Arc<dyn EmbeddingBackend>,
    cache: Arc<ResponseCache>,
}

impl CachedEmbeddings {
    pub fn new(inner: Arc<dyn EmbeddingBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    fn resolve(
        &self,
        key_material: Value,
        upstream: impl FnOnce() -> Result<Vec<Embedding>, ProviderError>,
    ) -> Result<Vec<Embedding>, ProviderError> {
        let key = canonical_digest(&key_material).map_err(|e| ProviderError::Cache(e.to_string()))?;
        let value = self.cache.cached_call(&key, || {
            let vectors = upstream()?;
            Ok(json!({ "embeddings": vectors }))
        })?;
        serde_json::from_value(value["embeddings"].clone())
            .map_err(|e| ProviderError::Cache(format!("entry {key}: {e}")))
    }
}

pub fn text_embedding_key(model: &str, texts: &[String]) -> Value {
    json!({"kind": "embeddings", "model_id": model, "input": texts})
}

pub fn image_embedding_key(model: &str, image: &ImagePart) -> Value {
    json!({
        "kind": "image_embedding",
        "model_id": model,
        "image": {"media_type": image.media_type, "sha256": image.digest()},
    })
}

impl EmbeddingBackend for CachedEmbeddings {
    fn embed_texts(&self, model: &str, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        self.resolve(text_embedding_key(model, texts), || {
            self.inner.embed_texts(model, texts)
        })
    }

    fn embed_image(&self, model: &str, image: &ImagePart) -> Result<Embedding, ProviderError> {
        let mut v = self.resolve(image_embedding_key(model, image), || {
            self.inner.embed_image(model, image).map(|e| vec![e])
        })?;
        v.pop()
            .ok_or_else(|| ProviderError::Cache("image embedding entry is empty".into()))
    }
}
