//! A chat backend that plays back canned replies, for transcript tests.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use serde_json::Value;

use super::{ChatBackend, ChatRequest, ChatResponse, ProviderError, Usage};

/// Replies keyed by schema name; requests without a schema use the key `"text"`.
///
/// Each key has a FIFO queue and an optional fallback used once the queue is
/// empty. A request with neither fails with a status error, which is how tests
/// script provider failures.
#[derive(Default)]
pub struct ScriptedChat {
    queues: Mutex<HashMap<String, VecDeque<String>>>,
    fallbacks: Mutex<HashMap<String, String>>,
    log: Mutex<Vec<LoggedCall>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoggedCall {
    pub schema: String,
    pub prompt: String,
    pub images: usize,
}

pub const TEXT_KEY: &str = "text";

fn key_of(req: &ChatRequest) -> String {
    req.response_schema
        .as_ref()
        .map(|s| s.name.clone())
        .unwrap_or_else(|| TEXT_KEY.to_string())
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a JSON reply for `schema`.
    pub fn push(&self, schema: &str, reply: Value) -> &Self {
        self.push_raw(schema, reply.to_string())
    }

    /// Queues a verbatim reply text, e.g. a malformed one.
    pub fn push_raw(&self, schema: &str, text: impl Into<String>) -> &Self {
        self.queues
            .lock()
            .unwrap()
            .entry(schema.to_string())
            .or_default()
            .push_back(text.into());
        self
    }

    pub fn fallback(&self, schema: &str, reply: Value) -> &Self {
        self.fallback_raw(schema, reply.to_string())
    }

    pub fn fallback_raw(&self, schema: &str, text: impl Into<String>) -> &Self {
        self.fallbacks.lock().unwrap().insert(schema.to_string(), text.into());
        self
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn calls_for(&self, schema: &str) -> usize {
        self.log.lock().unwrap().iter().filter(|c| c.schema == schema).count()
    }

    pub fn pending(&self, schema: &str) -> usize {
        self.queues.lock().unwrap().get(schema).map_or(0, VecDeque::len)
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let key = key_of(req);
        let prompt: String = req.messages.iter().map(|m| m.text()).collect::<Vec<_>>().join("\n");
        let images = req.messages.iter().flat_map(|m| m.images()).count();
        self.log.lock().unwrap().push(LoggedCall {
            schema: key.clone(),
            prompt: prompt.clone(),
            images,
        });
        let queued = self.queues.lock().unwrap().get_mut(&key).and_then(VecDeque::pop_front);
        let text = match queued.or_else(|| self.fallbacks.lock().unwrap().get(&key).cloned()) {
            Some(t) => t,
            None => {
                return Err(ProviderError::Status {
                    code: 500,
                    message: format!("no scripted reply for `{key}`"),
                })
            }
        };
        let parsed = req
            .response_schema
            .as_ref()
            .and_then(|_| super::structured::extract_json(&text));
        let usage = Usage {
            prompt_tokens: (prompt.len() / 4) as u64 + 85 * images as u64,
            completion_tokens: (text.len() / 4) as u64,
        };
        Ok(ChatResponse { text, parsed, usage })
    }
}
