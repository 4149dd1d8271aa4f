//! Numeric primitives, labels and verdicts shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A dense embedding vector. Arithmetic is always carried out in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("embedding must have dimension > 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("embedding component {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_same_dim(self, other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Unit-length copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Domain("cannot normalize the zero vector".into()));
        }
        Ok(Embedding(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        Embedding::new(values).map_err(serde::de::Error::custom)
    }
}

fn check_same_dim(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "embedding dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Anomalous,
    Uncertain,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Normal => "normal",
            Verdict::Anomalous => "anomalous",
            Verdict::Uncertain => "uncertain",
        }
    }

    pub fn is_final(self) -> bool {
        self != Verdict::Uncertain
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Verdict::Normal),
            "anomalous" => Ok(Verdict::Anomalous),
            "uncertain" => Ok(Verdict::Uncertain),
            other => Err(Error::Parse(format!("unknown verdict `{other}`"))),
        }
    }
}

/// Ground-truth label: 0 is normal, 1 is anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryLabel {
    Normal,
    Anomalous,
}

impl BinaryLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            BinaryLabel::Normal => 0,
            BinaryLabel::Anomalous => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(BinaryLabel::Normal),
            1 => Ok(BinaryLabel::Anomalous),
            other => Err(Error::Parse(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == BinaryLabel::Anomalous
    }
}

impl Serialize for BinaryLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for BinaryLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(deserializer)?;
        BinaryLabel::from_u8(v).map_err(serde::de::Error::custom)
    }
}

/// One evaluated image, carrying the auxiliary score used for ranking metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub image_id: String,
    pub label: BinaryLabel,
    pub verdict: Verdict,
    pub ranking_score: f64,
}

impl ScoredRecord {
    /// Builds a record whose score is `verdict_bit + sigmoid(mean_margin)`, so
    /// anomalous verdicts always outrank normal ones and the margin breaks ties.
    pub fn new(image_id: impl Into<String>, label: BinaryLabel, verdict: Verdict, mean_margin: f64) -> Result<Self> {
        if !verdict.is_final() {
            return Err(Error::Contract("scored records need a final verdict".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            label,
            verdict,
            ranking_score: ranking_score(verdict, mean_margin)?,
        })
    }
}

pub fn ranking_score(verdict: Verdict, mean_margin: f64) -> Result<f64> {
    let bit = if verdict == Verdict::Anomalous { 1.0 } else { 0.0 };
    Ok(bit + sigmoid(mean_margin)?)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_same_dim(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let cos = a.dot(b)? / (na * nb);
    Ok(cos.clamp(-1.0, 1.0))
}

pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("sigmoid of non-finite value {x}")));
    }
    Ok(1.0 / (1.0 + (-x).exp()))
}

pub fn clip_unit(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("clip of non-finite value {x}")));
    }
    Ok(x.clamp(0.0, 1.0))
}

/// SHA-256 over the canonical JSON encoding (sorted keys, no whitespace).
pub fn canonical_digest<T: Serialize + ?Sized>(payload: &T) -> Result<String> {
    let value = serde_json::to_value(payload).map_err(|e| Error::Encoding(e.to_string()))?;
    let mut bytes = Vec::new();
    write_canonical(&value, &mut bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) -> Result<()> {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).map_err(|e| Error::Encoding(e.to_string()))?;
                out.push(b':');
                write_canonical(&map[key], out)?;
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out)?;
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).map_err(|e| Error::Encoding(e.to_string()))?,
    }
    Ok(())
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
