//! Report construction and the text the stages see.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::episode::{ClassArtifacts, EpisodeMemory};
use super::AgentConfig;
use crate::error::Result;
use crate::memory::{calibrated_margin, calibrated_topk, compose_memory_report, retrieve_memories, MemoryReport};
use crate::prompts::NOTE_MARKER;
use crate::providers::{ImagePart, Providers};
use crate::templates::{
    build_general_report, candidate_margin, compose_counterfactual_report, retrieve_topk, soft_anomaly_score,
    CaptionSet, CounterfactualReport, GeneralReport,
};

/// Reports available to the stages of one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    #[serde(default)]
    pub general: Option<GeneralReport>,
    #[serde(default)]
    pub counterfactual: Option<CounterfactualReport>,
    #[serde(default)]
    pub memory: Option<MemoryReport>,
    #[serde(default)]
    pub class_note: Option<String>,
}

fn narrative(text: &str) -> &str {
    if text.is_empty() {
        "(unavailable)"
    } else {
        text
    }
}

impl Evidence {
    /// Template and counterfactual reports with bracketed identifiers.
    pub fn render_reports(&self) -> String {
        let mut out = String::new();
        if let Some(gr) = &self.general {
            let _ = writeln!(out, "Template matching report:\n{}", gr.table());
            let _ = writeln!(out, "[gr.narrative] {}\n", narrative(&gr.narrative));
        }
        if let Some(cr) = &self.counterfactual {
            let _ = writeln!(out, "Counterfactual candidate report:\n{}", cr.table());
            let _ = writeln!(out, "[cr.narrative] {}", narrative(&cr.narrative));
        }
        out
    }

    /// Memory report and class note, or an empty string in zero-shot runs.
    pub fn render_memory(&self) -> String {
        let mut out = String::new();
        if let Some(mem) = &self.memory {
            let _ = writeln!(
                out,
                "\nMemory of normal references (historical calibration, not a decision rule):\n{}",
                mem.render()
            );
        }
        if let Some(note) = &self.class_note {
            let _ = writeln!(out, "\n[note] {NOTE_MARKER} {note}");
        }
        out
    }

    pub fn evidence_ids(&self) -> Vec<String> {
        let mut ids = vec!["image".to_string()];
        if let Some(gr) = &self.general {
            ids.extend(gr.evidence_ids());
        }
        if let Some(cr) = &self.counterfactual {
            ids.extend(cr.evidence_ids());
        }
        if let Some(mem) = &self.memory {
            ids.extend(mem.evidence_ids());
        }
        if self.class_note.is_some() {
            ids.push("note".into());
        }
        ids
    }
}

/// Builds the general and counterfactual reports, plus the memory report and
/// class note when a memory context is present. Weights, when given, replace
/// plain candidate matching with calibrated matching.
pub fn build_evidence(
    p: &Providers,
    image: &ImagePart,
    class_name: &str,
    caps: &CaptionSet,
    artifacts: &ClassArtifacts,
    cfg: &AgentConfig,
    memory: Option<&EpisodeMemory>,
) -> Result<Evidence> {
    let general = build_general_report(p, class_name, caps, &artifacts.ensemble)?;
    let cands = &artifacts.candidates;
    let weights = memory.and_then(|m| m.weights.as_deref());

    let mut scores = Vec::with_capacity(3);
    let mut topk = Vec::with_capacity(3);
    let mut margins = Vec::with_capacity(3);
    for cap in caps.embeddings() {
        scores.push(soft_anomaly_score(cap, &artifacts.prototypes)?);
        match weights {
            Some(w) => {
                topk.push(calibrated_topk(cap, cands, w, cfg.tau_cand, cfg.top_k)?);
                margins.push(calibrated_margin(cap, cands, w, cfg.tau_cand)?);
            }
            None => {
                topk.push(retrieve_topk(cap, cands, cfg.top_k)?);
                margins.push(candidate_margin(cap, cands)?);
            }
        }
    }
    let counterfactual =
        compose_counterfactual_report(p, class_name, caps, &scores, topk, &margins, weights.is_some())?;

    let memory_report = match memory.and_then(|m| m.bank.as_deref().map(|b| (b, m.gamma))) {
        Some((bank, gamma)) => {
            let query = p
                .embed_image(image, &p.models.image_embedding)
                .map_err(crate::templates::in_stage("memory retrieval"))?;
            let retrieved = retrieve_memories(&query, bank, gamma)?;
            Some(compose_memory_report(&retrieved, bank))
        }
        None => None,
    };
    Ok(Evidence {
        general: Some(general),
        counterfactual: Some(counterfactual),
        memory: memory_report,
        class_note: memory.and_then(|m| m.class_note.clone()),
    })
}
