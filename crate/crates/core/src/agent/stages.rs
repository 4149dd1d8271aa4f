//! The three model-facing stages of an inspection turn.

use super::{Evidence, InspectionPlan, Judgment, Reflection, ReflectionMode};
use crate::error::{Error, Result};
use crate::primitives::Verdict;
use crate::prompts::{self, render};
use crate::providers::{ChatRequest, ImagePart, Message, Providers};
use crate::templates::in_stage;
use crate::vision::ToolKind;

/// An enhanced view produced by a tool in the current turn.
#[derive(Clone, Debug)]
pub struct Attachment {
    pub evidence_id: String,
    pub description: String,
    pub image: ImagePart,
}

fn tool_menu() -> String {
    ToolKind::ALL
        .iter()
        .map(|t| {
            let what = match t {
                ToolKind::Denoise => "non-local means noise reduction",
                ToolKind::Deblur => "unsharp-mask sharpening of blurred detail",
                ToolKind::Brightness => "contrast-limited equalization of lightness for dark or flat images",
                ToolKind::Zoom => "crop a region (requires region) and enlarge it",
                ToolKind::SuperResolution => "upscale the whole image",
            };
            format!("- {}: {what}", t.as_str())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn attachment_listing(attachments: &[Attachment]) -> String {
    if attachments.is_empty() {
        return "(none)".into();
    }
    attachments
        .iter()
        .map(|a| format!("[{}] {}", a.evidence_id, a.description))
        .collect::<Vec<_>>()
        .join("\n")
}

fn request(model: &str, prompt: String, image: &ImagePart, attachments: &[Attachment]) -> ChatRequest {
    let mut msg = Message::user(prompt).with_image(image.clone());
    for a in attachments {
        msg = msg.with_image(a.image.clone());
    }
    ChatRequest::new(model, vec![Message::system(prompts::SYSTEM), msg])
}

fn require_reports(evidence: &Evidence) -> Result<()> {
    if evidence.general.is_none() {
        return Err(Error::Precondition("template matching report is missing".into()));
    }
    if evidence.counterfactual.is_none() {
        return Err(Error::Precondition("counterfactual report is missing".into()));
    }
    Ok(())
}

fn plan_text(plan: &InspectionPlan) -> String {
    let anomalies = if plan.potential_anomalies.is_empty() {
        "(none listed)".to_string()
    } else {
        plan.potential_anomalies.join("; ")
    };
    format!("Potential anomalies: {anomalies}\nGuidance: {}", plan.heuristic_prompt)
}

pub fn plan(
    p: &Providers,
    image: &ImagePart,
    class_name: &str,
    evidence: &Evidence,
    heuristic: Option<&str>,
) -> Result<InspectionPlan> {
    require_reports(evidence)?;
    let prompt = render(
        prompts::PLANNER,
        &[
            ("class", class_name),
            ("reports", &evidence.render_reports()),
            ("heuristic", heuristic.unwrap_or("(none yet)")),
            ("tools", &tool_menu()),
        ],
    );
    let req = request(&p.models.primary, prompt, image, &[]);
    Ok(p.complete_structured::<InspectionPlan>(req)
        .map_err(in_stage("planning"))?
        .value)
}

pub fn reason(
    p: &Providers,
    image: &ImagePart,
    attachments: &[Attachment],
    class_name: &str,
    plan: &InspectionPlan,
    evidence: &Evidence,
) -> Result<Judgment> {
    require_reports(evidence)?;
    let prompt = render(
        prompts::REASONER,
        &[
            ("class", class_name),
            ("plan", &plan_text(plan)),
            ("reports", &evidence.render_reports()),
            ("memory", &evidence.render_memory()),
            ("attachments", &attachment_listing(attachments)),
        ],
    );
    let req = request(&p.models.primary, prompt, image, attachments);
    Ok(p.complete_structured::<Judgment>(req)
        .map_err(in_stage("reasoning"))?
        .value)
}

#[allow(clippy::too_many_arguments)]
pub fn reflect(
    p: &Providers,
    image: &ImagePart,
    attachments: &[Attachment],
    class_name: &str,
    plan: &InspectionPlan,
    judgment: &Judgment,
    evidence: &Evidence,
    mode: ReflectionMode,
) -> Result<Reflection> {
    let framing = match (mode, judgment.verdict) {
        (ReflectionMode::Uncertain, Verdict::Uncertain) => {
            "The latest judgment was uncertain. Work out what kept the inspection from deciding."
        }
        (ReflectionMode::ConfirmNormal, Verdict::Normal) => {
            "The latest judgment was normal, but the verdict must be confirmed. Re-examine with fresh \
             emphasis and look for anything the inspection could have missed."
        }
        (_, v) => {
            return Err(Error::Precondition(format!(
                "cannot reflect in {mode:?} mode on a {v} judgment"
            )))
        }
    };
    require_reports(evidence)?;
    let judgment_text = format!(
        "Verdict: {}\nReason: {}\nCited: {}",
        judgment.verdict,
        judgment.reason,
        judgment.cited_evidence.join(", ")
    );
    let prompt = render(
        prompts::REFLECTOR,
        &[
            ("class", class_name),
            ("framing", framing),
            ("plan", &plan_text(plan)),
            ("judgment", &judgment_text),
            ("reports", &evidence.render_reports()),
            ("tools", &tool_menu()),
        ],
    );
    let req = request(&p.models.primary, prompt, image, attachments);
    Ok(p.complete_structured::<Reflection>(req)
        .map_err(in_stage("reflection"))?
        .value)
}
