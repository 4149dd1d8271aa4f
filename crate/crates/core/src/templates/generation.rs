//! Provider-backed steps: captioning, candidate generation, ensemble
//! embedding and report narratives.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    clean_candidates, template_statistics, CandidateSet, CaptionSet, CounterfactualReport, GeneralReport,
    TemplateEnsemble, TopK, MIN_CANDIDATES_PER_SIDE,
};
use crate::error::{Error, Result};
use crate::prompts::{self, render};
use crate::providers::{ChatRequest, ImagePart, Message, Providers, StructuredOutput};
use crate::vision::ImageBuffer;

/// Provider failures inside a named stage become stage errors; local
/// precondition and contract errors pass through unchanged.
pub(crate) fn in_stage(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Provider(p) => Error::stage(stage, p.to_string()),
        other => other,
    }
}

fn check_class(class_name: &str) -> Result<()> {
    if class_name.trim().is_empty() {
        return Err(Error::Precondition("class name is empty".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionReply {
    pub captions: Vec<String>,
}

impl StructuredOutput for CaptionReply {
    const NAME: &'static str = "captions";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "captions": {"type": "array", "items": {"type": "string"}, "minItems": 3, "maxItems": 3}
            },
            "required": ["captions"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.captions.len() != 3 {
            return Err(format!("expected exactly 3 captions, got {}", self.captions.len()));
        }
        if self.captions.iter().any(|c| c.trim().is_empty()) {
            return Err("captions must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateReply {
    pub anomaly: Vec<String>,
    pub normal: Vec<String>,
}

impl StructuredOutput for CandidateReply {
    const NAME: &'static str = "candidates";

    fn schema() -> Value {
        let list = json!({"type": "array", "items": {"type": "string"}});
        json!({
            "type": "object",
            "properties": {"anomaly": list, "normal": list},
            "required": ["anomaly", "normal"],
            "additionalProperties": false
        })
    }
}

/// Three perspective captions of `img`, embedded with the text embedder.
pub fn generate_captions(p: &Providers, img: &ImageBuffer, class_name: &str) -> Result<CaptionSet> {
    check_class(class_name)?;
    let image = ImagePart::png(img.encode_png()?);
    let prompt = render(prompts::DESCRIPTION, &[("class", class_name)]);
    let req = ChatRequest::new(
        p.models.primary.clone(),
        vec![
            Message::system(prompts::SYSTEM),
            Message::user(prompt).with_image(image),
        ],
    );
    let stage = in_stage("captioning");
    let reply = p.complete_structured::<CaptionReply>(req).map_err(&stage)?.value;
    let captions: Vec<String> = reply.captions.into_iter().map(|c| c.trim().to_string()).collect();
    let embeddings = p.embed_texts(&captions, &p.models.text_embedding).map_err(&stage)?;
    CaptionSet::new(captions, embeddings)
}

/// Class-conditioned anomaly and normal candidates, cleaned and embedded.
pub fn generate_candidates(p: &Providers, class_name: &str) -> Result<CandidateSet> {
    check_class(class_name)?;
    let stage = in_stage("candidate generation");
    let prompt = render(prompts::CANDIDATE_GENERATION, &[("class", class_name)]);
    let req = ChatRequest::new(
        p.models.auxiliary.clone(),
        vec![Message::system(prompts::SYSTEM), Message::user(prompt)],
    );
    let reply = p.complete_structured::<CandidateReply>(req).map_err(&stage)?.value;
    let (anomaly, normal) = clean_candidates(reply.anomaly, reply.normal);
    if anomaly.len() < MIN_CANDIDATES_PER_SIDE || normal.len() < MIN_CANDIDATES_PER_SIDE {
        return Err(Error::stage(
            "candidate generation",
            format!(
                "insufficient prior for `{class_name}`: {} anomaly and {} normal candidates after cleaning, \
                 need {MIN_CANDIDATES_PER_SIDE} each",
                anomaly.len(),
                normal.len()
            ),
        ));
    }
    let texts: Vec<String> = anomaly.iter().chain(&normal).cloned().collect();
    let mut embs = p.embed_texts(&texts, &p.models.text_embedding).map_err(&stage)?;
    let normal_embs = embs.split_off(anomaly.len());
    CandidateSet::new(class_name, anomaly, normal, embs, normal_embs)
}

/// The shipped template ensemble for `class_name`, embedded.
pub fn embed_ensemble(p: &Providers, class_name: &str) -> Result<TemplateEnsemble> {
    check_class(class_name)?;
    let (version, normal, anomaly) = TemplateEnsemble::texts_for(class_name)?;
    let texts: Vec<String> = normal.iter().chain(&anomaly).cloned().collect();
    let mut embs = p
        .embed_texts(&texts, &p.models.text_embedding)
        .map_err(in_stage("template embedding"))?;
    let anomaly_embs = embs.split_off(normal.len());
    TemplateEnsemble::new(class_name, version, normal, anomaly, embs, anomaly_embs)
}

/// Free-text summary from the auxiliary model; empty on failure.
fn narrate(p: &Providers, what: &str, prompt: String) -> String {
    let req = ChatRequest::new(
        p.models.auxiliary.clone(),
        vec![Message::system(prompts::SYSTEM), Message::user(prompt)],
    );
    match p.complete_multimodal(&req) {
        Ok(resp) => resp.text.trim().to_string(),
        Err(e) => {
            warn!("{what} narrative unavailable, keeping numbers only: {e}");
            String::new()
        }
    }
}

pub fn build_general_report(
    p: &Providers,
    class_name: &str,
    caps: &CaptionSet,
    ens: &TemplateEnsemble,
) -> Result<GeneralReport> {
    let mut report = GeneralReport {
        captions: template_statistics(caps, ens)?,
        narrative: String::new(),
    };
    let prompt = render(
        prompts::GENERAL_REPORT,
        &[
            ("class", class_name),
            ("captions", &caps.listing()),
            ("table", &report.table()),
        ],
    );
    report.narrative = narrate(p, "template report", prompt);
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn compose_counterfactual_report(
    p: &Providers,
    class_name: &str,
    caps: &CaptionSet,
    scores: &[f64],
    topk: Vec<TopK>,
    margins: &[f64],
    calibrated: bool,
) -> Result<CounterfactualReport> {
    if scores.len() != caps.captions().len() {
        return Err(Error::Precondition(
            "evidence does not belong to this caption set".into(),
        ));
    }
    let mut report = CounterfactualReport::from_parts(scores, topk, margins, calibrated)?;
    let table = format!("{}\n{}", caps.listing(), report.table());
    let prompt = render(
        prompts::COUNTERFACTUAL_REPORT,
        &[
            ("class", class_name),
            ("leaning", report.leaning.describe()),
            ("table", &table),
        ],
    );
    report.narrative = narrate(p, "counterfactual report", prompt);
    Ok(report)
}

type Slot<T> = Arc<Mutex<Option<Arc<T>>>>;

/// Per-class artifacts computed once and then shared read-only.
pub struct ClassCache<T> {
    slots: Mutex<HashMap<String, Slot<T>>>,
}

impl<T> Default for ClassCache<T> {
    fn default() -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
        }
    }
}

impl<T> ClassCache<T> {
    fn slot(&self, class_name: &str) -> Slot<T> {
        self.slots
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(class_name.to_string())
            .or_default()
            .clone()
    }

    /// Returns the cached value or runs `init` once; concurrent callers for the
    /// same class wait for the first. A failed init leaves the slot empty.
    pub fn get_or_try_init(&self, class_name: &str, init: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let slot = self.slot(class_name);
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(init()?);
        *guard = Some(v.clone());
        Ok(v)
    }

    pub fn get(&self, class_name: &str) -> Option<Arc<T>> {
        self.slot(class_name).lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn insert(&self, class_name: &str, value: T) -> Arc<T> {
        let v = Arc::new(value);
        *self.slot(class_name).lock().unwrap_or_else(|p| p.into_inner()) = Some(v.clone());
        v
    }
}

pub type CandidateStore = ClassCache<CandidateSet>;
pub type TemplateStore = ClassCache<TemplateEnsemble>;

impl CandidateStore {
    pub fn candidates(&self, p: &Providers, class_name: &str) -> Result<Arc<CandidateSet>> {
        self.get_or_try_init(class_name, || generate_candidates(p, class_name))
    }
}

impl TemplateStore {
    pub fn ensemble(&self, p: &Providers, class_name: &str) -> Result<Arc<TemplateEnsemble>> {
        self.get_or_try_init(class_name, || embed_ensemble(p, class_name))
    }
}
