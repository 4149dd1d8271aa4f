//! Schema-constrained completions with bounded re-prompting.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::types::OutputSchema;

/// A reply type the model is asked to produce as a JSON object.
pub trait StructuredOutput: DeserializeOwned + Serialize {
    const NAME: &'static str;

    fn schema() -> Value;

    /// Semantic checks beyond what deserialization enforces.
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }

    fn output_schema() -> OutputSchema {
        OutputSchema {
            name: Self::NAME.to_string(),
            schema: Self::schema(),
        }
    }
}

/// Pulls the first JSON object out of a reply, tolerating code fences and chatter.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return v.is_object().then_some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str::<Value>(&trimmed[start..=end])
        .ok()
        .filter(Value::is_object)
}

/// Decodes and validates a structured reply.
pub fn decode<T: StructuredOutput>(parsed: Option<&Value>, text: &str) -> Result<T, String> {
    let value = match parsed {
        Some(v) => v.clone(),
        None => extract_json(text).ok_or_else(|| "reply is not a JSON object".to_string())?,
    };
    let out: T = serde_json::from_value(value).map_err(|e| e.to_string())?;
    out.validate()?;
    Ok(out)
}

pub fn reprompt_text(schema: &str, problem: &str) -> String {
    format!(
        "Your previous reply was rejected: {problem}. Reply again with a single JSON object \
         that satisfies the `{schema}` schema, and nothing else."
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Serialize, Deserialize)]
    struct Pair {
        items: Vec<String>,
    }

    impl StructuredOutput for Pair {
        const NAME: &'static str = "pair";
        fn schema() -> Value {
            json!({"type": "object"})
        }
        fn validate(&self) -> Result<(), String> {
            if self.items.len() == 2 {
                Ok(())
            } else {
                Err(format!("expected 2 items, got {}", self.items.len()))
            }
        }
    }

    #[test]
    fn extracts_fenced_json() {
        let v = extract_json("Sure!\n```json\n{\"a\": 1}\n```").unwrap();
        assert_eq!(v, json!({"a": 1}));
        assert!(extract_json("no json here").is_none());
        assert!(extract_json("[1, 2]").is_none());
    }

    #[test]
    fn decode_applies_validation() {
        assert!(decode::<Pair>(None, r#"{"items": ["a", "b"]}"#).is_ok());
        let err = decode::<Pair>(None, r#"{"items": ["a"]}"#).unwrap_err();
        assert!(err.contains("expected 2"));
        assert!(decode::<Pair>(None, r#"{"other": 1}"#).is_err());
    }
}
