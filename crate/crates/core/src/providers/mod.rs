//! Access to hosted multimodal completion and embedding models.
//!
//! Everything funnels through two small traits, [`ChatBackend`] and
//! [`EmbeddingBackend`]. The HTTP client, the record/replay cache and the
//! offline doubles all implement them, and [`Providers`] layers the request
//! preconditions and structured-output enforcement on top.

mod cache;
mod openai;
pub mod scripted;
pub mod simulated;
mod structured;
mod transport;
mod types;

use std::io::Cursor;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{
    image_embedding_key, text_embedding_key, CacheEntry, CacheMode, CachedChat, CachedEmbeddings, ResponseCache,
};
pub use openai::{chat_body, data_url, OpenAiClient, RetryPolicy, CHAT_PATH, EMBEDDINGS_PATH};
pub use structured::{decode, extract_json, StructuredOutput};
pub use transport::{DenyTransport, HttpTransport, Transport, TransportError};
pub use types::{ChatRequest, ChatResponse, ImagePart, Message, OutputSchema, Part, Role, Usage};

use crate::error::{Error, Result};
use crate::primitives::Embedding;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider rejected credentials: {0}")]
    Auth(String),
    #[error("provider quota exhausted: {0}")]
    Quota(String),
    #[error("provider returned status {code}: {message}")]
    Status { code: u16, message: String },
    #[error("reply violates schema `{schema}`: {message}")]
    Schema { schema: String, message: String },
    #[error("replay cache miss for request digest {digest}")]
    CacheMiss { digest: String },
    #[error("provider contract violated: {0}")]
    Contract(String),
    #[error("network access denied: {0}")]
    Denied(String),
    #[error("cache error: {0}")]
    Cache(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed_texts(&self, model: &str, texts: &[String]) -> Result<Vec<Embedding>, ProviderError>;
    fn embed_image(&self, model: &str, image: &ImagePart) -> Result<Embedding, ProviderError>;
}

/// Model identifiers for the two completion tiers and the two embedders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSet {
    /// Captioning, planning, reasoning and reflection.
    pub primary: String,
    /// Candidate generation, report narratives and memory summarization.
    pub auxiliary: String,
    pub text_embedding: String,
    pub image_embedding: String,
}

impl Default for ModelSet {
    fn default() -> Self {
        Self {
            primary: "gpt-4.1".into(),
            auxiliary: "gpt-4.1-mini".into(),
            text_embedding: "text-embedding-3-large".into(),
            image_embedding: "image-embedding".into(),
        }
    }
}

/// A structured reply plus the usage spent obtaining it.
#[derive(Clone, Debug)]
pub struct Structured<T> {
    pub value: T,
    pub usage: Usage,
    pub attempts: u32,
}

/// Accumulates token usage for one scope (an episode, a calibration pass).
#[derive(Debug, Default)]
pub struct UsageMeter(Mutex<Usage>);

impl UsageMeter {
    pub fn add(&self, usage: Usage) {
        *self.0.lock().unwrap_or_else(|p| p.into_inner()) += usage;
    }

    pub fn total(&self) -> Usage {
        *self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Clone)]
pub struct Providers {
    chat: Arc<dyn ChatBackend>,
    embeddings: Arc<dyn EmbeddingBackend>,
    pub models: ModelSet,
    schema_retries: u32,
    meter: Arc<UsageMeter>,
}

impl Providers {
    pub fn new(chat: Arc<dyn ChatBackend>, embeddings: Arc<dyn EmbeddingBackend>, models: ModelSet) -> Self {
        Self {
            chat,
            embeddings,
            models,
            schema_retries: 2,
            meter: Arc::default(),
        }
    }

    /// Same backends, fresh usage meter.
    pub fn metered(&self) -> Self {
        Self {
            meter: Arc::default(),
            ..self.clone()
        }
    }

    pub fn usage(&self) -> Usage {
        self.meter.total()
    }

    /// OpenAI-compatible client over `transport`, optionally behind the response cache.
    pub fn over_transport(
        transport: Arc<dyn Transport>,
        cache: Option<Arc<ResponseCache>>,
        models: ModelSet,
        retry: RetryPolicy,
    ) -> Self {
        let client = Arc::new(OpenAiClient::new(transport, retry));
        match cache {
            Some(cache) => Self::new(
                Arc::new(CachedChat::new(client.clone(), cache.clone())),
                Arc::new(CachedEmbeddings::new(client, cache)),
                models,
            ),
            None => Self::new(client.clone(), client, models),
        }
    }

    pub fn complete_multimodal(&self, req: &ChatRequest) -> Result<ChatResponse> {
        if req.messages.is_empty() {
            return Err(Error::Precondition("chat request has no messages".into()));
        }
        if req.model_id.trim().is_empty() {
            return Err(Error::Precondition("chat request has no model id".into()));
        }
        if req.messages.iter().filter(|m| m.has_image()).count() > 1 {
            return Err(Error::Precondition(
                "at most one image-bearing message per request".into(),
            ));
        }
        for img in req.messages.iter().flat_map(|m| m.images()) {
            check_decodable_header(&img.data)?;
        }
        let resp = self.chat.complete(req)?;
        self.meter.add(resp.usage);
        Ok(resp)
    }

    /// Requests a `T`-shaped reply, re-prompting up to twice on parse or validation failure.
    pub fn complete_structured<T: StructuredOutput>(&self, req: ChatRequest) -> Result<Structured<T>> {
        let mut req = req.with_schema(T::output_schema());
        let mut usage = Usage::default();
        let mut last_problem = String::new();
        for attempt in 1..=self.schema_retries + 1 {
            let resp = self.complete_multimodal(&req)?;
            usage += resp.usage;
            match structured::decode::<T>(resp.parsed.as_ref(), &resp.text) {
                Ok(value) => {
                    return Ok(Structured {
                        value,
                        usage,
                        attempts: attempt,
                    })
                }
                Err(problem) => {
                    log::debug!("{} attempt {attempt} rejected: {problem}", T::NAME);
                    req.messages.push(Message::assistant(resp.text));
                    req.messages
                        .push(Message::user(structured::reprompt_text(T::NAME, &problem)));
                    last_problem = problem;
                }
            }
        }
        Err(ProviderError::Schema {
            schema: T::NAME.to_string(),
            message: last_problem,
        }
        .into())
    }

    pub fn embed_texts(&self, texts: &[String], model: &str) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Err(Error::Precondition("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::Precondition(format!("text {i} is empty")));
        }
        let out = self.embeddings.embed_texts(model, texts)?;
        if out.len() != texts.len() {
            return Err(
                ProviderError::Contract(format!("asked for {} embeddings, got {}", texts.len(), out.len())).into(),
            );
        }
        openai::check_uniform_dim(&out)?;
        Ok(out)
    }

    pub fn embed_image(&self, image: &ImagePart, model: &str) -> Result<Embedding> {
        image::load_from_memory(&image.data).map_err(|e| Error::Input(format!("undecodable image: {e}")))?;
        Ok(self.embeddings.embed_image(model, image)?)
    }
}

fn check_decodable_header(bytes: &[u8]) -> Result<()> {
    image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Input(e.to_string()))?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| Error::Input(format!("undecodable image payload: {e}")))
}
