//! JSON-over-HTTP transports for OpenAI-compatible endpoints.

use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Io(String),
    #[error("http status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("undecodable response body: {0}")]
    Decode(String),
    #[error("network access denied: {0}")]
    Denied(String),
}

impl TransportError {
    /// Transport failures, 5xx and 429 are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Io(_) => true,
            TransportError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportError::Decode(_) | TransportError::Denied(_) => false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError>;
}

/// Blocking HTTP transport with optional bearer auth.
pub struct HttpTransport {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self {
            agent: config.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url, path.trim_start_matches('/'))
    }

    /// Raw byte POST, used by the optional remote super-resolution tool.
    pub fn post_bytes(&self, path: &str, content_type: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let mut req = self.agent.post(&self.url(path)).header("Content-Type", content_type);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportError::Io(e.to_string()))?;
        let code = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| TransportError::Decode(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(TransportError::Status {
                code,
                body: String::from_utf8_lossy(&bytes).into_owned(),
            });
        }
        Ok(bytes)
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| TransportError::Io(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Decode(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(TransportError::Status { code, body: text });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }
}

/// Refuses every request. Installed under replay-strict caching so a cache miss
/// can never silently reach the network.
#[derive(Debug, Default, Clone, Copy)]
pub struct DenyTransport;

impl Transport for DenyTransport {
    fn post_json(&self, path: &str, _body: &Value) -> Result<Value, TransportError> {
        Err(TransportError::Denied(format!("POST {path}")))
    }
}
