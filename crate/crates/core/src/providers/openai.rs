//! Client for the OpenAI-compatible chat-completions and embeddings wire protocol.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use log::warn;
use serde_json::{json, Value};

use super::transport::{Transport, TransportError};
use super::types::{ChatRequest, ChatResponse, ImagePart, Part, Usage};
use super::{ChatBackend, EmbeddingBackend, ProviderError};
use crate::primitives::Embedding;

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const EMBEDDINGS_PATH: &str = "/v1/embeddings";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn delay_before(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

pub struct OpenAiClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl OpenAiClient {
    pub fn new(transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self { transport, retry }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut attempt = 1;
        loop {
            match self.transport.post_json(path, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay_before(attempt);
                    warn!("{path}: attempt {attempt} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(classify(e)),
            }
        }
    }
}

fn classify(err: TransportError) -> ProviderError {
    match err {
        TransportError::Status { code: 401 | 403, body } => ProviderError::Auth(provider_message(&body)),
        TransportError::Status { code: 402, body } => ProviderError::Quota(provider_message(&body)),
        TransportError::Status { code, body } => ProviderError::Status {
            code,
            message: provider_message(&body),
        },
        TransportError::Denied(m) => ProviderError::Denied(m),
        other => ProviderError::Transport(other.to_string()),
    }
}

/// Pulls `error.message` out of an OpenAI-style error body when present.
fn provider_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

pub fn data_url(image: &ImagePart) -> String {
    format!(
        "data:{};base64,{}",
        image.media_type,
        BASE64.encode(image.data.as_slice())
    )
}

/// Builds the JSON body for `POST /v1/chat/completions`.
pub fn chat_body(req: &ChatRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(img) => json!({"type": "image_url", "image_url": {"url": data_url(img)}}),
                })
                .collect();
            json!({"role": m.role, "content": content})
        })
        .collect();
    let mut body = json!({
        "model": req.model_id,
        "messages": messages,
        "temperature": req.temperature,
    });
    if let Some(schema) = &req.response_schema {
        body["response_format"] = json!({
            "type": "json_schema",
            "json_schema": {"name": schema.name, "schema": schema.schema, "strict": true},
        });
    }
    body
}

pub fn parse_chat_response(req: &ChatRequest, body: &Value) -> Result<ChatResponse, ProviderError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Contract("response has no choices[0].message.content".into()))?
        .to_string();
    let usage = Usage {
        prompt_tokens: body
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
        completion_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    let parsed = if req.response_schema.is_some() {
        super::structured::extract_json(&text)
    } else {
        None
    };
    Ok(ChatResponse { text, parsed, usage })
}

pub fn parse_embeddings(body: &Value, expected: usize) -> Result<Vec<Embedding>, ProviderError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Contract("embedding response has no `data` array".into()))?;
    if data.len() != expected {
        return Err(ProviderError::Contract(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut slots: Vec<Option<Embedding>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let values: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Contract(format!("data[{pos}] has no embedding array")))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| ProviderError::Contract("non-numeric embedding value".into()))
            })
            .collect::<Result<_, _>>()?;
        let emb = Embedding::new(values).map_err(|e| ProviderError::Contract(e.to_string()))?;
        let slot = slots
            .get_mut(idx)
            .ok_or_else(|| ProviderError::Contract(format!("embedding index {idx} out of range")))?;
        *slot = Some(emb);
    }
    let out: Vec<Embedding> = slots
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| ProviderError::Contract(format!("missing embedding {i}"))))
        .collect::<Result<_, _>>()?;
    check_uniform_dim(&out)?;
    Ok(out)
}

pub(crate) fn check_uniform_dim(embeddings: &[Embedding]) -> Result<(), ProviderError> {
    if let Some(first) = embeddings.first() {
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != first.dim()) {
            return Err(ProviderError::Contract(format!(
                "inconsistent embedding dimensions in batch: {} vs {}",
                first.dim(),
                bad.dim()
            )));
        }
    }
    Ok(())
}

impl ChatBackend for OpenAiClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let body = self.post(CHAT_PATH, &chat_body(req))?;
        parse_chat_response(req, &body)
    }
}

impl EmbeddingBackend for OpenAiClient {
    fn embed_texts(&self, model: &str, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        let body = self.post(EMBEDDINGS_PATH, &json!({"model": model, "input": texts}))?;
        parse_embeddings(&body, texts.len())
    }

    fn embed_image(&self, model: &str, image: &ImagePart) -> Result<Embedding, ProviderError> {
        let body = self.post(EMBEDDINGS_PATH, &json!({"model": model, "input": [data_url(image)]}))?;
        Ok(parse_embeddings(&body, 1)?.remove(0))
    }
}
