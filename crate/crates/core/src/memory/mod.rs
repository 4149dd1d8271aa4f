//! Few-shot self-calibration from normal reference images: candidate
//! reliability weights, a retrievable reference bank and a gated class note.

mod bank;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use bank::{
    build_memory_bank, calibrate_weights, draft_class_note, judge_relations, load_bank, note_gate, record_reference,
    save_bank, BankBuild, BankProvenance, ClassNoteReply, HardNormalEntry, HardNormalRecord, RelationItem,
    RelationReply, StoredBank,
};

use crate::agent::EpisodeMemory;
use crate::error::{Error, Result};
use crate::primitives::{clip_unit, cosine_similarity, mean, Embedding, Verdict};
use crate::templates::{
    rank_candidates, CandidateSet, CandidateSide, CaptionSet, CounterfactualReport, GeneralReport, TopK,
};

pub const INITIAL_WEIGHT: f64 = 0.5;
/// Update coefficient for ordinary reference evidence.
pub const BASE_STEP: f64 = 0.1;
/// Larger coefficient used when counterfactual evidence favoured anomaly on a normal reference.
pub const CORRECTIVE_STEP: f64 = 0.2;
/// Sign factor for an anomaly candidate that conflicts with a normal reference.
pub const CONFLICT_REINFORCEMENT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Fit,
    Conflict,
    Unrelated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationJudgment {
    pub relation: Relation,
    pub candidate: String,
    pub reference_id: String,
}

/// Reliability weight per candidate string, each in [0, 1].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct CalibrationWeights(BTreeMap<String, f64>);

impl TryFrom<BTreeMap<String, f64>> for CalibrationWeights {
    type Error = Error;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((k, v)) = map.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("weight of `{k}` is {v}, outside [0, 1]")));
        }
        Ok(Self(map))
    }
}

impl From<CalibrationWeights> for BTreeMap<String, f64> {
    fn from(w: CalibrationWeights) -> Self {
        w.0
    }
}

impl CalibrationWeights {
    /// Every candidate at the neutral weight.
    pub fn uniform(cands: &CandidateSet) -> Self {
        Self(cands.iter().map(|(_, s, _)| (s.clone(), INITIAL_WEIGHT)).collect())
    }

    pub fn get(&self, candidate: &str) -> Option<f64> {
        self.0.get(candidate).copied()
    }

    pub fn weight(&self, candidate: &str) -> Result<f64> {
        self.get(candidate)
            .ok_or_else(|| Error::Contract(format!("no calibration weight for candidate `{candidate}`")))
    }

    pub fn set(&mut self, candidate: &str, w: f64) -> Result<()> {
        self.0.insert(candidate.to_string(), clip_unit(w)?);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &f64)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Δ = s·δ·max(ρ, 0)` applied to `w` and clipped to [0, 1].
///
/// `s` is +1 for a normal candidate that fits, −1 for an anomaly candidate that
/// fits, `CONFLICT_REINFORCEMENT` for an anomaly candidate in conflict and 0
/// otherwise; `δ` is `CORRECTIVE_STEP` when `cr_was_wrong`, else `BASE_STEP`.
pub fn update_weight(w: f64, relation: Relation, rho: f64, side: CandidateSide, cr_was_wrong: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("weight {w} outside [0, 1]")));
    }
    if !rho.is_finite() {
        return Err(Error::Domain(format!("matching strength {rho} is not finite")));
    }
    let s = match (side, relation) {
        (CandidateSide::Normal, Relation::Fit) => 1.0,
        (CandidateSide::Anomaly, Relation::Fit) => -1.0,
        (CandidateSide::Anomaly, Relation::Conflict) => CONFLICT_REINFORCEMENT,
        _ => 0.0,
    };
    let delta = if cr_was_wrong { CORRECTIVE_STEP } else { BASE_STEP };
    clip_unit(w + s * delta * rho.max(0.0))
}

/// Best cosine between a candidate and any of the reference's captions.
pub fn matching_strength(caps: &CaptionSet, candidate: &Embedding) -> Result<f64> {
    caps.embeddings()
        .iter()
        .map(|c| cosine_similarity(c, candidate))
        .try_fold(f64::NEG_INFINITY, |acc, s| s.map(|s| acc.max(s)))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Parameter(format!("tau_cand must be > 0, got {tau}")));
    }
    Ok(())
}

/// `ℓ = sim/τ + (w − 0.5)`.
pub fn calibrated_score(sim: f64, w: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(sim / tau + (w - INITIAL_WEIGHT))
}

pub fn calibrated_match_score(caption: &Embedding, candidate: &Embedding, w: f64, tau: f64) -> Result<f64> {
    calibrated_score(cosine_similarity(caption, candidate)?, w, tau)
}

fn side_max(
    caption: &Embedding,
    cands: &CandidateSet,
    side: CandidateSide,
    weights: &CalibrationWeights,
    tau: f64,
) -> Result<f64> {
    let (texts, embs) = cands.side(side);
    if texts.is_empty() {
        return Err(Error::Precondition(format!("{} side has no candidates", side.as_str())));
    }
    let mut best = f64::NEG_INFINITY;
    for (t, e) in texts.iter().zip(embs) {
        best = best.max(calibrated_match_score(caption, e, weights.weight(t)?, tau)?);
    }
    Ok(best)
}

/// `τ·max_a ℓ(d, a) − τ·max_n ℓ(d, n)`.
pub fn calibrated_margin(
    caption: &Embedding,
    cands: &CandidateSet,
    weights: &CalibrationWeights,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let a = side_max(caption, cands, CandidateSide::Anomaly, weights, tau)?;
    let n = side_max(caption, cands, CandidateSide::Normal, weights, tau)?;
    Ok(tau * a - tau * n)
}

/// Top-k candidates ranked by `τ·ℓ`, which equals the raw similarity at neutral weights.
pub fn calibrated_topk(
    caption: &Embedding,
    cands: &CandidateSet,
    weights: &CalibrationWeights,
    tau: f64,
    k: usize,
) -> Result<TopK> {
    check_tau(tau)?;
    rank_candidates(caption, cands, k, |side, i, sim| {
        let (texts, _) = cands.side(side);
        Ok(tau * calibrated_score(sim, weights.weight(&texts[i])?, tau)?)
    })
}

/// Evidence captured from the zero-shot pipeline on one normal reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub image_id: String,
    pub image_digest: String,
    pub captions: CaptionSet,
    pub report_gr: GeneralReport,
    pub report_cr: CounterfactualReport,
    pub verdict: Verdict,
    pub reason: String,
}

impl ReferenceRecord {
    /// References are normal by construction.
    pub fn correctly_judged(&self) -> bool {
        self.verdict == Verdict::Normal
    }

    /// Counterfactual evidence favoured anomaly on this normal reference.
    pub fn cr_was_wrong(&self) -> bool {
        self.report_cr.mean_margin > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub embedding: Embedding,
    pub record: ReferenceRecord,
}

/// Verdicts of the references before and after re-judging with the draft note.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub before: Vec<bool>,
    pub after: Vec<bool>,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub class_name: String,
    pub entries: Vec<MemoryEntry>,
    #[serde(default)]
    pub class_note: Option<String>,
    pub note_enabled: bool,
    #[serde(default)]
    pub validation: Option<GateOutcome>,
    #[serde(default)]
    pub hard_normals: Vec<HardNormalRecord>,
}

impl MemoryBank {
    /// The class note, only when it passed validation.
    pub fn enabled_note(&self) -> Option<&str> {
        self.class_note.as_deref().filter(|_| self.note_enabled)
    }

    pub fn context(
        self: &std::sync::Arc<Self>,
        weights: std::sync::Arc<CalibrationWeights>,
        gamma: f64,
    ) -> EpisodeMemory {
        EpisodeMemory {
            weights: Some(weights),
            bank: Some(self.clone()),
            gamma,
            class_note: self.enabled_note().map(str::to_string),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedMemory {
    pub index: usize,
    pub image_id: String,
    pub similarity: f64,
}

/// Entries whose image embedding has cosine strictly above `gamma`, most similar first.
pub fn retrieve_memories(query: &Embedding, bank: &MemoryBank, gamma: f64) -> Result<Vec<RetrievedMemory>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Parameter(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let mut hits = Vec::new();
    for (index, entry) in bank.entries.iter().enumerate() {
        let similarity = cosine_similarity(query, &entry.embedding)?;
        if similarity > gamma {
            hits.push(RetrievedMemory {
                index,
                image_id: entry.record.image_id.clone(),
                similarity,
            });
        }
    }
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    Ok(hits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryHit {
    pub image_id: String,
    pub similarity: f64,
    pub mean_margin: f64,
    pub correctly_judged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub hits: Vec<MemoryHit>,
    pub mean_similarity: Option<f64>,
    pub max_similarity: Option<f64>,
    /// Mean counterfactual margin of the retrieved references.
    pub mean_margin: Option<f64>,
    /// Whether every retrieved reference was judged normal by the pipeline.
    pub reliable: Option<bool>,
}

pub fn compose_memory_report(retrieved: &[RetrievedMemory], bank: &MemoryBank) -> MemoryReport {
    let hits: Vec<MemoryHit> = retrieved
        .iter()
        .filter_map(|r| bank.entries.get(r.index).map(|e| (r, e)))
        .map(|(r, e)| MemoryHit {
            image_id: r.image_id.clone(),
            similarity: r.similarity,
            mean_margin: e.record.report_cr.mean_margin,
            correctly_judged: e.record.correctly_judged(),
        })
        .collect();
    let sims: Vec<f64> = hits.iter().map(|h| h.similarity).collect();
    let margins: Vec<f64> = hits.iter().map(|h| h.mean_margin).collect();
    MemoryReport {
        mean_similarity: mean(&sims),
        max_similarity: sims.iter().copied().reduce(f64::max),
        mean_margin: mean(&margins),
        reliable: (!hits.is_empty()).then(|| hits.iter().all(|h| h.correctly_judged)),
        hits,
    }
}

impl MemoryReport {
    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn render(&self) -> String {
        if self.hits.is_empty() {
            return "[mem.retrieved] 0: no similar normal reference in memory.".into();
        }
        let mut out = String::new();
        let _ = writeln!(out, "[mem.retrieved] {} similar normal reference(s)", self.hits.len());
        for h in &self.hits {
            let _ = writeln!(
                out,
                "  {}: similarity {:.4}, mean margin {:+.4}, {}",
                h.image_id,
                h.similarity,
                h.mean_margin,
                if h.correctly_judged {
                    "judged normal"
                } else {
                    "misjudged as anomalous"
                }
            );
        }
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:+.4}")).unwrap_or_default();
        let _ = writeln!(out, "[mem.mean_similarity] {}", fmt(self.mean_similarity));
        let _ = writeln!(out, "[mem.max_similarity] {}", fmt(self.max_similarity));
        let _ = writeln!(out, "[mem.mean_margin] {}", fmt(self.mean_margin));
        let _ = writeln!(out, "[mem.reliable] {}", self.reliable.unwrap_or(false));
        out
    }

    pub fn evidence_ids(&self) -> Vec<String> {
        let mut ids = vec!["mem.retrieved".to_string()];
        if !self.hits.is_empty() {
            for f in ["mean_similarity", "max_similarity", "mean_margin", "reliable"] {
                ids.push(format!("mem.{f}"));
            }
        }
        ids
    }
}
