//! Semantic evidence from captions: template-ensemble matching and
//! counterfactual atomic-candidate matching.

mod generation;

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub(crate) use generation::in_stage;
pub use generation::{
    build_general_report, compose_counterfactual_report, embed_ensemble, generate_candidates, generate_captions,
    CandidateReply, CandidateStore, CaptionReply, ClassCache, TemplateStore,
};

use crate::error::{Error, Result};
use crate::primitives::{cosine_similarity, mean, sigmoid, Embedding};

pub const PERSPECTIVES: [&str; 3] = ["global appearance", "local structure", "component layout"];
pub const MAX_CANDIDATE_WORDS: usize = 20;
pub const MIN_CANDIDATES_PER_SIDE: usize = 5;
/// Mean margins closer to zero than this are reported as indeterminate.
pub const INDETERMINATE_MARGIN: f64 = 0.01;

const ENSEMBLE_V1: &str = include_str!("../../assets/templates/ensemble_v1.json");
const CLASS_PLACEHOLDER: &str = "{c}";

fn check_dims(what: &str, embs: &[Embedding]) -> Result<()> {
    if let Some(first) = embs.first() {
        if embs.iter().any(|e| e.dim() != first.dim()) {
            return Err(Error::Contract(format!("{what} embeddings differ in dimension")));
        }
    }
    Ok(())
}

/// Three perspective-specific captions of one image with their embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCaptionSet")]
pub struct CaptionSet {
    captions: Vec<String>,
    embeddings: Vec<Embedding>,
}

#[derive(Deserialize)]
struct RawCaptionSet {
    captions: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl TryFrom<RawCaptionSet> for CaptionSet {
    type Error = Error;

    fn try_from(raw: RawCaptionSet) -> Result<Self> {
        CaptionSet::new(raw.captions, raw.embeddings)
    }
}

impl CaptionSet {
    pub fn new(captions: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if captions.len() != 3 || embeddings.len() != 3 {
            return Err(Error::Contract(format!(
                "caption set needs 3 captions and 3 embeddings, got {} and {}",
                captions.len(),
                embeddings.len()
            )));
        }
        if captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::Contract("captions must be nonempty".into()));
        }
        check_dims("caption", &embeddings)?;
        Ok(Self { captions, embeddings })
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Numbered caption lines, `1. ...`.
    pub fn listing(&self) -> String {
        self.captions
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Deserialize)]
struct EnsembleAsset {
    version: u32,
    normal: Vec<String>,
    anomaly: Vec<String>,
}

/// Class-conditioned normal and anomaly prompt templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateEnsemble {
    pub class_name: String,
    pub version: u32,
    pub normal: Vec<String>,
    pub anomaly: Vec<String>,
    pub normal_embeddings: Vec<Embedding>,
    pub anomaly_embeddings: Vec<Embedding>,
}

impl TemplateEnsemble {
    /// The shipped template strings with `{c}` expanded: `(version, normal, anomaly)`.
    pub fn texts_for(class_name: &str) -> Result<(u32, Vec<String>, Vec<String>)> {
        let asset: EnsembleAsset =
            serde_json::from_str(ENSEMBLE_V1).map_err(|e| Error::Parse(format!("template asset: {e}")))?;
        let expand = |list: Vec<String>| -> Vec<String> {
            list.into_iter()
                .map(|t| t.replace(CLASS_PLACEHOLDER, class_name))
                .collect()
        };
        Ok((asset.version, expand(asset.normal), expand(asset.anomaly)))
    }

    pub fn new(
        class_name: &str,
        version: u32,
        normal: Vec<String>,
        anomaly: Vec<String>,
        normal_embeddings: Vec<Embedding>,
        anomaly_embeddings: Vec<Embedding>,
    ) -> Result<Self> {
        if normal.is_empty() || anomaly.is_empty() {
            return Err(Error::Contract("template ensembles must be nonempty".into()));
        }
        if normal.len() != normal_embeddings.len() || anomaly.len() != anomaly_embeddings.len() {
            return Err(Error::Contract("one embedding per template required".into()));
        }
        if let Some(t) = normal.iter().chain(&anomaly).find(|t| !t.contains(class_name)) {
            return Err(Error::Contract(format!(
                "template `{t}` does not mention `{class_name}`"
            )));
        }
        let all: Vec<Embedding> = normal_embeddings.iter().chain(&anomaly_embeddings).cloned().collect();
        check_dims("template", &all)?;
        Ok(Self {
            class_name: class_name.to_string(),
            version,
            normal,
            anomaly,
            normal_embeddings,
            anomaly_embeddings,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSide {
    Anomaly,
    Normal,
}

impl CandidateSide {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateSide::Anomaly => "anomaly",
            CandidateSide::Normal => "normal",
        }
    }
}

/// Word count and case-insensitive key used for atomicity and dedup.
fn dedup_key(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Trims, drops empty or over-long phrases and removes case-insensitive
/// duplicates. Dedup runs across both sides so every candidate string is a
/// unique key; the anomaly side is listed first and wins ties.
pub fn clean_candidates(anomaly: Vec<String>, normal: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut keep = |list: Vec<String>| -> Vec<String> {
        list.into_iter()
            .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|s| {
                let words = s.split_whitespace().count();
                words > 0 && words <= MAX_CANDIDATE_WORDS && seen.insert(dedup_key(s))
            })
            .collect()
    };
    let a = keep(anomaly);
    let n = keep(normal);
    (a, n)
}

/// Atomic anomaly and normal candidates for one class with their embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub class_name: String,
    pub anomaly: Vec<String>,
    pub normal: Vec<String>,
    pub anomaly_embeddings: Vec<Embedding>,
    pub normal_embeddings: Vec<Embedding>,
}

impl CandidateSet {
    pub fn new(
        class_name: &str,
        anomaly: Vec<String>,
        normal: Vec<String>,
        anomaly_embeddings: Vec<Embedding>,
        normal_embeddings: Vec<Embedding>,
    ) -> Result<Self> {
        if anomaly.is_empty() || normal.is_empty() {
            return Err(Error::Contract("candidate sides must be nonempty".into()));
        }
        if anomaly.len() != anomaly_embeddings.len() || normal.len() != normal_embeddings.len() {
            return Err(Error::Contract("one embedding per candidate required".into()));
        }
        let mut seen = HashSet::new();
        for c in anomaly.iter().chain(&normal) {
            if c.split_whitespace().count() > MAX_CANDIDATE_WORDS {
                return Err(Error::Contract(format!(
                    "candidate `{c}` exceeds {MAX_CANDIDATE_WORDS} words"
                )));
            }
            if !seen.insert(dedup_key(c)) {
                return Err(Error::Contract(format!("duplicate candidate `{c}`")));
            }
        }
        let all: Vec<Embedding> = anomaly_embeddings.iter().chain(&normal_embeddings).cloned().collect();
        check_dims("candidate", &all)?;
        Ok(Self {
            class_name: class_name.to_string(),
            anomaly,
            normal,
            anomaly_embeddings,
            normal_embeddings,
        })
    }

    pub fn side(&self, side: CandidateSide) -> (&[String], &[Embedding]) {
        match side {
            CandidateSide::Anomaly => (&self.anomaly, &self.anomaly_embeddings),
            CandidateSide::Normal => (&self.normal, &self.normal_embeddings),
        }
    }

    /// Every candidate with its side, anomaly side first.
    pub fn iter(&self) -> impl Iterator<Item = (CandidateSide, &String, &Embedding)> {
        let a = self
            .anomaly
            .iter()
            .zip(&self.anomaly_embeddings)
            .map(|(s, e)| (CandidateSide::Anomaly, s, e));
        let n = self
            .normal
            .iter()
            .zip(&self.normal_embeddings)
            .map(|(s, e)| (CandidateSide::Normal, s, e));
        a.chain(n)
    }

    pub fn len(&self) -> usize {
        self.anomaly.len() + self.normal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unit-length mean embeddings of each candidate side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub anomaly: Embedding,
    pub normal: Embedding,
}

fn unit_mean(embs: &[Embedding], side: &str) -> Result<Embedding> {
    let first = embs
        .first()
        .ok_or_else(|| Error::Precondition(format!("no {side} candidate embeddings")))?;
    let mut acc = vec![0.0; first.dim()];
    for e in embs {
        if e.dim() != acc.len() {
            return Err(Error::Contract(format!("{side} embeddings differ in dimension")));
        }
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v;
        }
    }
    let n = embs.len() as f64;
    let mean = Embedding::new(acc.into_iter().map(|v| v / n).collect())?;
    if mean.norm() < 1e-12 {
        return Err(Error::Domain(format!(
            "degenerate {side} prototype: candidate embeddings cancel out"
        )));
    }
    mean.normalized()
}

pub fn compute_prototypes(cands: &CandidateSet) -> Result<Prototypes> {
    Ok(Prototypes {
        anomaly: unit_mean(&cands.anomaly_embeddings, "anomaly")?,
        normal: unit_mean(&cands.normal_embeddings, "normal")?,
    })
}

/// `σ(sim(c, p_A) − sim(c, p_N))`.
pub fn soft_anomaly_score(caption: &Embedding, protos: &Prototypes) -> Result<f64> {
    sigmoid(cosine_similarity(caption, &protos.anomaly)? - cosine_similarity(caption, &protos.normal)?)
}

/// Indices of the `k` largest scores, descending, ties resolved by lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatch {
    pub index: usize,
    pub candidate: String,
    pub similarity: f64,
    /// Ranking score; equals `similarity` unless calibration weights were applied.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub anomaly: Vec<CandidateMatch>,
    pub normal: Vec<CandidateMatch>,
}

pub fn similarities(caption: &Embedding, embs: &[Embedding]) -> Result<Vec<f64>> {
    embs.iter().map(|e| cosine_similarity(caption, e)).collect()
}

/// Top-`k` matches per side ranked by `score_of(side, index, similarity)`.
pub fn rank_candidates(
    caption: &Embedding,
    cands: &CandidateSet,
    k: usize,
    score_of: impl Fn(CandidateSide, usize, f64) -> Result<f64>,
) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Parameter("top-k needs k >= 1".into()));
    }
    let side = |s: CandidateSide| -> Result<Vec<CandidateMatch>> {
        let (texts, embs) = cands.side(s);
        let sims = similarities(caption, embs)?;
        let scores: Vec<f64> = sims
            .iter()
            .enumerate()
            .map(|(i, &sim)| score_of(s, i, sim))
            .collect::<Result<_>>()?;
        Ok(top_k_indices(&scores, k)
            .into_iter()
            .map(|i| CandidateMatch {
                index: i,
                candidate: texts[i].clone(),
                similarity: sims[i],
                score: scores[i],
            })
            .collect())
    };
    Ok(TopK {
        anomaly: side(CandidateSide::Anomaly)?,
        normal: side(CandidateSide::Normal)?,
    })
}

pub fn retrieve_topk(caption: &Embedding, cands: &CandidateSet, k: usize) -> Result<TopK> {
    rank_candidates(caption, cands, k, |_, _, sim| Ok(sim))
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Best anomaly-candidate similarity minus best normal-candidate similarity.
pub fn candidate_margin(caption: &Embedding, cands: &CandidateSet) -> Result<f64> {
    if cands.anomaly.is_empty() || cands.normal.is_empty() {
        return Err(Error::Precondition("candidate margin needs both sides nonempty".into()));
    }
    let a = max_of(&similarities(caption, &cands.anomaly_embeddings)?);
    let n = max_of(&similarities(caption, &cands.normal_embeddings)?);
    Ok(a - n)
}

/// Similarity of one caption against both template ensembles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionTemplateStats {
    pub max_anomaly: f64,
    pub mean_anomaly: f64,
    pub max_normal: f64,
    pub mean_normal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralReport {
    pub captions: Vec<CaptionTemplateStats>,
    pub narrative: String,
}

pub fn template_statistics(caps: &CaptionSet, ens: &TemplateEnsemble) -> Result<Vec<CaptionTemplateStats>> {
    caps.embeddings()
        .iter()
        .map(|c| {
            let a = similarities(c, &ens.anomaly_embeddings)?;
            let n = similarities(c, &ens.normal_embeddings)?;
            Ok(CaptionTemplateStats {
                max_anomaly: max_of(&a),
                mean_anomaly: mean(&a).unwrap_or(0.0),
                max_normal: max_of(&n),
                mean_normal: mean(&n).unwrap_or(0.0),
            })
        })
        .collect()
}

impl GeneralReport {
    /// Numeric table with evidence identifiers in brackets.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (j, s) in self.captions.iter().enumerate() {
            let i = j + 1;
            let _ = writeln!(
                out,
                "caption {i}: [gr.caption[{i}].max_anomaly] {:.4}, [gr.caption[{i}].mean_anomaly] {:.4}, \
                 [gr.caption[{i}].max_normal] {:.4}, [gr.caption[{i}].mean_normal] {:.4}",
                s.max_anomaly, s.mean_anomaly, s.max_normal, s.mean_normal
            );
        }
        out
    }

    pub fn evidence_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for i in 1..=self.captions.len() {
            for f in ["max_anomaly", "mean_anomaly", "max_normal", "mean_normal"] {
                ids.push(format!("gr.caption[{i}].{f}"));
            }
        }
        ids.push("gr.narrative".into());
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceLeaning {
    Anomalous,
    Normal,
    Indeterminate,
}

impl EvidenceLeaning {
    pub fn from_margin(mean_margin: f64) -> Self {
        if mean_margin > INDETERMINATE_MARGIN {
            EvidenceLeaning::Anomalous
        } else if mean_margin < -INDETERMINATE_MARGIN {
            EvidenceLeaning::Normal
        } else {
            EvidenceLeaning::Indeterminate
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            EvidenceLeaning::Anomalous => "leans anomalous",
            EvidenceLeaning::Normal => "leans normal",
            EvidenceLeaning::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEvidence {
    pub soft_score: f64,
    pub margin: f64,
    pub top_anomaly: Vec<CandidateMatch>,
    pub top_normal: Vec<CandidateMatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub captions: Vec<CaptionEvidence>,
    pub mean_margin: f64,
    pub leaning: EvidenceLeaning,
    /// Whether margins and rankings used calibration weights.
    pub calibrated: bool,
    pub narrative: String,
}

impl CounterfactualReport {
    /// Assembles the numeric part; the narrative starts empty.
    pub fn from_parts(scores: &[f64], topk: Vec<TopK>, margins: &[f64], calibrated: bool) -> Result<Self> {
        if scores.len() != margins.len() || topk.len() != margins.len() || margins.is_empty() {
            return Err(Error::Precondition(format!(
                "mismatched evidence lengths: {} scores, {} top-k, {} margins",
                scores.len(),
                topk.len(),
                margins.len()
            )));
        }
        let mean_margin = mean(margins).expect("nonempty");
        let captions = scores
            .iter()
            .zip(margins)
            .zip(topk)
            .map(|((&soft_score, &margin), t)| CaptionEvidence {
                soft_score,
                margin,
                top_anomaly: t.anomaly,
                top_normal: t.normal,
            })
            .collect();
        Ok(Self {
            captions,
            mean_margin,
            leaning: EvidenceLeaning::from_margin(mean_margin),
            calibrated,
            narrative: String::new(),
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let list = |ms: &[CandidateMatch]| -> String {
            ms.iter()
                .map(|m| format!("\"{}\" ({:.3})", m.candidate, m.score))
                .collect::<Vec<_>>()
                .join("; ")
        };
        for (j, c) in self.captions.iter().enumerate() {
            let i = j + 1;
            let _ = writeln!(
                out,
                "caption {i}: [cr.caption[{i}].score] {:.4}, [cr.caption[{i}].margin] {:+.4}",
                c.soft_score, c.margin
            );
            let _ = writeln!(out, "  [cr.caption[{i}].top_anomaly] {}", list(&c.top_anomaly));
            let _ = writeln!(out, "  [cr.caption[{i}].top_normal] {}", list(&c.top_normal));
        }
        let _ = writeln!(
            out,
            "[cr.mean_margin] {:+.4} ({}{})",
            self.mean_margin,
            self.leaning.describe(),
            if self.calibrated {
                ", calibrated with normal references"
            } else {
                ""
            }
        );
        out
    }

    pub fn evidence_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for i in 1..=self.captions.len() {
            for f in ["score", "margin", "top_anomaly", "top_normal"] {
                ids.push(format!("cr.caption[{i}].{f}"));
            }
        }
        ids.push("cr.mean_margin".into());
        ids.push("cr.narrative".into());
        ids
    }

    pub fn match_count(&self) -> (usize, usize) {
        self.captions
            .iter()
            .fold((0, 0), |(a, n), c| (a + c.top_anomaly.len(), n + c.top_normal.len()))
    }
}
