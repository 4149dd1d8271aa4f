//! Building, validating and persisting a class's reference memory.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    matching_strength, update_weight, CalibrationWeights, GateOutcome, MemoryBank, MemoryEntry, ReferenceRecord,
    Relation, RelationJudgment,
};
use crate::agent::{run_episode, EpisodeContext, EpisodeMemory, EpisodeTrace};
use crate::error::{Error, Result};
use crate::primitives::Verdict;
use crate::prompts::{self, render};
use crate::providers::{ChatRequest, ImagePart, Message, Providers, StructuredOutput};
use crate::templates::{in_stage, CandidateSet, CaptionSet};
use crate::vision::ImageBuffer;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationItem {
    pub index: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationReply {
    pub relations: Vec<RelationItem>,
}

impl StructuredOutput for RelationReply {
    const NAME: &'static str = "relations";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "relations": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "index": {"type": "integer", "minimum": 0},
                            "relation": {"type": "string", "enum": ["fit", "conflict", "unrelated"]}
                        },
                        "required": ["index", "relation"],
                        "additionalProperties": false
                    }
                }
            },
            "required": ["relations"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Why one normal reference looked anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardNormalEntry {
    pub misleading_cues: Vec<String>,
    pub explanation: String,
}

impl StructuredOutput for HardNormalEntry {
    const NAME: &'static str = "hard_normal_entry";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "misleading_cues": {"type": "array", "items": {"type": "string"}},
                "explanation": {"type": "string"}
            },
            "required": ["misleading_cues", "explanation"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.explanation.trim().is_empty() {
            return Err("explanation must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassNoteReply {
    pub note: String,
}

impl StructuredOutput for ClassNoteReply {
    const NAME: &'static str = "class_note";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {"note": {"type": "string"}},
            "required": ["note"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.note.trim().is_empty() {
            return Err("note must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardNormalRecord {
    pub image_id: String,
    pub misleading_cues: Vec<String>,
    pub explanation: String,
}

fn text_request(model: &str, prompt: String) -> ChatRequest {
    ChatRequest::new(model, vec![Message::system(prompts::SYSTEM), Message::user(prompt)])
}

/// Relation of every candidate to one reference's captions, in `cands.iter()`
/// order. A failed or partial reply leaves the affected candidates unrelated.
pub fn judge_relations(
    p: &Providers,
    class_name: &str,
    captions: &CaptionSet,
    cands: &CandidateSet,
    reference_id: &str,
) -> Vec<RelationJudgment> {
    let listing = cands
        .iter()
        .enumerate()
        .map(|(i, (side, text, _))| format!("[{i}] {}: {text}", side.as_str()))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = render(
        prompts::RELATION_JUDGE,
        &[
            ("class", class_name),
            ("captions", &captions.listing()),
            ("candidates", &listing),
        ],
    );
    let mut relations = vec![Relation::Unrelated; cands.len()];
    match p.complete_structured::<RelationReply>(text_request(&p.models.auxiliary, prompt)) {
        Ok(reply) => {
            for item in reply.value.relations {
                match relations.get_mut(item.index) {
                    Some(slot) => *slot = item.relation,
                    None => warn!("relation for unknown candidate index {} ignored", item.index),
                }
            }
        }
        Err(e) => warn!("relation judging failed for {reference_id}, treating all candidates as unrelated: {e}"),
    }
    cands
        .iter()
        .zip(relations)
        .map(|((_, text, _), relation)| RelationJudgment {
            relation,
            candidate: text.clone(),
            reference_id: reference_id.to_string(),
        })
        .collect()
}

/// Sequential weight updates over the references in order.
pub fn calibrate_weights(
    p: &Providers,
    class_name: &str,
    records: &[&ReferenceRecord],
    cands: &CandidateSet,
) -> Result<CalibrationWeights> {
    let mut weights = CalibrationWeights::uniform(cands);
    for record in records {
        let judged = judge_relations(p, class_name, &record.captions, cands, &record.image_id);
        for ((side, text, emb), rel) in cands.iter().zip(judged) {
            let rho = matching_strength(&record.captions, emb)?;
            let w = update_weight(weights.weight(text)?, rel.relation, rho, side, record.cr_was_wrong())?;
            weights.set(text, w)?;
        }
    }
    Ok(weights)
}

/// Runs the zero-shot pipeline on a normal reference and captures its evidence.
pub fn record_reference(
    ctx: &EpisodeContext,
    img: &ImageBuffer,
    image_id: &str,
    class_name: &str,
) -> (EpisodeTrace, Result<MemoryEntry>) {
    let trace = run_episode(ctx, img, image_id, class_name, None);
    let entry = entry_from_trace(ctx.providers, img, &trace);
    (trace, entry)
}

fn entry_from_trace(p: &Providers, img: &ImageBuffer, trace: &EpisodeTrace) -> Result<MemoryEntry> {
    let failed = || Error::stage("reference", format!("episode for {} did not complete", trace.image_id));
    if !trace.is_completed() {
        return Err(failed());
    }
    let (Some(captions), Some(report_gr), Some(report_cr), Some(verdict)) = (
        trace.captions.clone(),
        trace.evidence.general.clone(),
        trace.evidence.counterfactual.clone(),
        trace.final_verdict,
    ) else {
        return Err(failed());
    };
    let embedding = p
        .embed_image(&ImagePart::png(img.encode_png()?), &p.models.image_embedding)
        .map_err(in_stage("reference embedding"))?;
    Ok(MemoryEntry {
        embedding,
        record: ReferenceRecord {
            image_id: trace.image_id.clone(),
            image_digest: img.digest(),
            captions,
            report_gr,
            report_cr,
            verdict,
            reason: trace.last_reason().unwrap_or_default().to_string(),
        },
    })
}

fn hard_normal_entry(p: &Providers, class_name: &str, record: &ReferenceRecord) -> Result<HardNormalRecord> {
    let evidence = format!(
        "Counterfactual mean margin: {:+.4} ({})\n{}",
        record.report_cr.mean_margin,
        record.report_cr.leaning.describe(),
        record.report_cr.table()
    );
    let prompt = render(
        prompts::HARD_NEGATIVE_ENTRY,
        &[
            ("class", class_name),
            ("captions", &record.captions.listing()),
            (
                "judgment",
                &format!("Verdict: {}\nReason: {}", record.verdict, record.reason),
            ),
            ("reports", &evidence),
        ],
    );
    let reply = p
        .complete_structured::<HardNormalEntry>(text_request(&p.models.primary, prompt))
        .map_err(in_stage("hard-normal reflection"))?
        .value;
    Ok(HardNormalRecord {
        image_id: record.image_id.clone(),
        misleading_cues: reply.misleading_cues,
        explanation: reply.explanation,
    })
}

/// Reflects on every misjudged reference and summarizes the results into a
/// draft class note. Returns `None` when nothing was misjudged or no entry
/// could be produced.
pub fn draft_class_note(
    p: &Providers,
    class_name: &str,
    misjudged: &[&ReferenceRecord],
) -> Option<(Vec<HardNormalRecord>, String)> {
    let entries: Vec<HardNormalRecord> = misjudged
        .iter()
        .filter_map(|r| {
            hard_normal_entry(p, class_name, r)
                .map_err(|e| warn!("no hard-normal entry for {}: {e}", r.image_id))
                .ok()
        })
        .collect();
    if entries.is_empty() {
        return None;
    }
    let listing = entries
        .iter()
        .map(|e| format!("- {}: {} ({})", e.image_id, e.misleading_cues.join("; "), e.explanation))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = render(
        prompts::HARD_NEGATIVE_SUMMARY,
        &[("class", class_name), ("entries", &listing)],
    );
    match p.complete_structured::<ClassNoteReply>(text_request(&p.models.primary, prompt)) {
        Ok(reply) => Some((entries, reply.value.note.trim().to_string())),
        Err(e) => {
            warn!("class note summary failed for {class_name}: {e}");
            None
        }
    }
}

/// The note is kept only if strictly more references are judged correctly
/// and none that was correct becomes wrong.
pub fn note_gate(before: &[bool], after: &[bool]) -> bool {
    assert_eq!(before.len(), after.len(), "gate compares the same references");
    let count = |v: &[bool]| v.iter().filter(|c| **c).count();
    let no_regression = before.iter().zip(after).all(|(b, a)| !*b || *a);
    count(after) > count(before) && no_regression
}

pub struct BankBuild {
    pub bank: MemoryBank,
    pub weights: CalibrationWeights,
    /// Zero-shot traces of every reference, usable or not.
    pub reference_traces: Vec<EpisodeTrace>,
    /// Note-only re-judging traces, empty when no note was drafted.
    pub validation_traces: Vec<EpisodeTrace>,
}

/// Turns normal reference images into calibration weights, a retrievable
/// bank and, when it proves helpful on the references, a class note.
pub fn build_memory_bank(
    ctx: &EpisodeContext,
    class_name: &str,
    references: &[(String, ImageBuffer)],
) -> Result<BankBuild> {
    let p = ctx.providers;
    let mut reference_traces = Vec::with_capacity(references.len());
    let mut entries = Vec::new();
    let mut usable = Vec::new();
    for (id, img) in references {
        let (trace, entry) = record_reference(ctx, img, id, class_name);
        reference_traces.push(trace);
        match entry {
            Ok(e) => {
                entries.push(e);
                usable.push(img);
            }
            Err(e) => warn!("reference {class_name}/{id} excluded: {e}"),
        }
    }
    if entries.is_empty() {
        return Err(Error::stage(
            "memory",
            format!("no usable normal reference for {class_name}"),
        ));
    }

    let records: Vec<&ReferenceRecord> = entries.iter().map(|e| &e.record).collect();
    let weights = calibrate_weights(p, class_name, &records, &ctx.artifacts.candidates)?;

    let misjudged: Vec<&ReferenceRecord> = records.iter().copied().filter(|r| !r.correctly_judged()).collect();
    let mut hard_normals = Vec::new();
    let mut class_note = None;
    let mut validation = None;
    let mut validation_traces = Vec::new();
    if let Some((drafted, note)) = draft_class_note(p, class_name, &misjudged) {
        let before: Vec<bool> = records.iter().map(|r| r.correctly_judged()).collect();
        let memory = EpisodeMemory {
            class_note: Some(note.clone()),
            ..EpisodeMemory::default()
        };
        let mut after = Vec::with_capacity(usable.len());
        for (img, record) in usable.iter().zip(&records) {
            let trace = run_episode(ctx, img, &record.image_id, class_name, Some(&memory));
            after.push(trace.is_completed() && trace.final_verdict == Some(Verdict::Normal));
            validation_traces.push(trace);
        }
        let accepted = note_gate(&before, &after);
        info!(
            "class note for {class_name} {}: {} -> {} references correct",
            if accepted { "accepted" } else { "rejected" },
            before.iter().filter(|c| **c).count(),
            after.iter().filter(|c| **c).count()
        );
        hard_normals = drafted;
        class_note = Some(note);
        validation = Some(GateOutcome {
            before,
            after,
            accepted,
        });
    }

    let note_enabled = validation.as_ref().is_some_and(|g| g.accepted);
    Ok(BankBuild {
        bank: MemoryBank {
            class_name: class_name.to_string(),
            entries,
            class_note,
            note_enabled,
            validation,
            hard_normals,
        },
        weights,
        reference_traces,
        validation_traces,
    })
}

/// Inputs a stored bank was built from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub reference_digests: Vec<String>,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredBank {
    pub provenance: BankProvenance,
    pub bank: MemoryBank,
    pub weights: CalibrationWeights,
}

impl StoredBank {
    pub fn into_memory(self, gamma: f64) -> EpisodeMemory {
        Arc::new(self.bank).context(Arc::new(self.weights), gamma)
    }
}

pub fn save_bank(path: &Path, stored: &StoredBank) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec_pretty(stored).map_err(|e| Error::Encoding(e.to_string()))?;
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A stored bank, if one exists at `path` and was built from the same inputs.
pub fn load_bank(path: &Path, expected: &BankProvenance) -> Result<Option<StoredBank>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let stored: StoredBank =
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if &stored.provenance != expected {
        info!("stored bank at {} is stale, rebuilding", path.display());
        return Ok(None);
    }
    Ok(Some(stored))
}
