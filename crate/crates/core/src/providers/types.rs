use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::primitives::{canonical_digest, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Encoded image bytes attached to a message.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePart {
    pub media_type: String,
    pub data: Arc<Vec<u8>>,
}

impl ImagePart {
    pub fn png(data: Vec<u8>) -> Self {
        Self {
            media_type: "image/png".into(),
            data: Arc::new(data),
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Part {
    Text(String),
    Image(ImagePart),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn with_image(mut self, image: ImagePart) -> Self {
        self.parts.push(Part::Image(image));
        self
    }

    pub fn has_image(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, Part::Image(_)))
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(img) => Some(img),
            Part::Text(_) => None,
        })
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Named JSON schema the provider is asked to constrain its output to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSchema {
    pub name: String,
    pub schema: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub response_schema: Option<OutputSchema>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            response_schema: None,
            temperature: 0.0,
        }
    }

    pub fn with_schema(mut self, schema: OutputSchema) -> Self {
        self.response_schema = Some(schema);
        self
    }

    /// Key material for the response cache: image bytes are replaced by their digests.
    pub fn key_material(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let parts: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::Image(img) => json!({
                            "type": "image",
                            "media_type": img.media_type,
                            "sha256": img.digest(),
                        }),
                    })
                    .collect();
                json!({"role": m.role, "parts": parts})
            })
            .collect();
        json!({
            "kind": "chat",
            "model_id": self.model_id,
            "messages": messages,
            "response_schema": self.response_schema,
            "temperature": self.temperature,
        })
    }

    pub fn cache_key(&self) -> Result<String> {
        canonical_digest(&self.key_material())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub parsed: Option<Value>,
    #[serde(default)]
    pub usage: Usage,
}
