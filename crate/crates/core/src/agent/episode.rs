//! One image's inspection episode as an explicit state machine.

use std::sync::Arc;

use log::{debug, warn};

use super::evidence::build_evidence;
use super::stages::{plan, reason, reflect, Attachment};
use super::{
    AgentConfig, EpisodeStatus, EpisodeTrace, Evidence, ReflectionMode, Termination, TraceStep, MAX_TOOLS_PER_TURN,
};
use crate::error::Result;
use crate::memory::{CalibrationWeights, MemoryBank};
use crate::primitives::Verdict;
use crate::providers::{ImagePart, Providers, Usage};
use crate::templates::{
    compute_prototypes, generate_captions, CandidateSet, CandidateStore, Prototypes, TemplateEnsemble, TemplateStore,
};
use crate::vision::{ImageBuffer, ToolInvocation, ToolRequest, ToolRunner};

/// Per-class evidence inputs shared read-only by every episode of the class.
#[derive(Clone, Debug)]
pub struct ClassArtifacts {
    pub candidates: Arc<CandidateSet>,
    pub ensemble: Arc<TemplateEnsemble>,
    pub prototypes: Prototypes,
}

impl ClassArtifacts {
    pub fn new(candidates: Arc<CandidateSet>, ensemble: Arc<TemplateEnsemble>) -> Result<Self> {
        let prototypes = compute_prototypes(&candidates)?;
        Ok(Self {
            candidates,
            ensemble,
            prototypes,
        })
    }

    /// Generates (or reuses) the candidates and template embeddings for a class.
    pub fn prepare(
        p: &Providers,
        class_name: &str,
        candidates: &CandidateStore,
        templates: &TemplateStore,
    ) -> Result<Self> {
        Self::new(
            candidates.candidates(p, class_name)?,
            templates.ensemble(p, class_name)?,
        )
    }
}

/// Few-shot context: calibration weights, the reference bank and an enabled class note.
/// Any part may be absent; the re-validation pass uses the note alone.
#[derive(Clone, Debug, Default)]
pub struct EpisodeMemory {
    pub weights: Option<Arc<CalibrationWeights>>,
    pub bank: Option<Arc<MemoryBank>>,
    pub gamma: f64,
    pub class_note: Option<String>,
}

pub struct EpisodeContext<'a> {
    pub providers: &'a Providers,
    pub config: &'a AgentConfig,
    pub tools: &'a ToolRunner,
    pub artifacts: &'a ClassArtifacts,
}

/// Runs the inspection loop on one image. Never fails: stage errors end the
/// episode with a failed trace that carries the diagnostic.
pub fn run_episode(
    ctx: &EpisodeContext,
    img: &ImageBuffer,
    image_id: &str,
    class_name: &str,
    memory: Option<&EpisodeMemory>,
) -> EpisodeTrace {
    let p = ctx.providers.metered();
    let mut trace = EpisodeTrace {
        image_id: image_id.to_string(),
        class_name: class_name.to_string(),
        status: EpisodeStatus::Completed,
        error: None,
        captions: None,
        evidence: Evidence::default(),
        steps: Vec::new(),
        final_verdict: None,
        termination: None,
        iterations: 0,
        usage: Usage::default(),
    };
    if let Err(e) = drive(&p, ctx, img, class_name, memory, &mut trace) {
        warn!("episode {class_name}/{image_id} failed: {e}");
        trace.status = EpisodeStatus::Failed;
        trace.error = Some(e.to_string());
        trace.final_verdict = None;
        trace.termination = None;
    }
    trace.usage = p.usage();
    trace
}

fn describe(inv: &ToolInvocation, out: &ImageBuffer) -> String {
    match inv.region {
        Some(r) => format!(
            "{} of region x={} y={} {}x{} px, shown at {}x{}",
            inv.tool,
            r.x,
            r.y,
            r.width,
            r.height,
            out.width(),
            out.height()
        ),
        None => format!("{} of the whole image, {}x{}", inv.tool, out.width(), out.height()),
    }
}

fn finish(trace: &mut EpisodeTrace, verdict: Verdict, how: Termination) {
    trace.final_verdict = Some(verdict);
    trace.termination = Some(how);
}

fn drive(
    p: &Providers,
    ctx: &EpisodeContext,
    img: &ImageBuffer,
    class_name: &str,
    memory: Option<&EpisodeMemory>,
    trace: &mut EpisodeTrace,
) -> Result<()> {
    let cfg = ctx.config;
    let image = ImagePart::png(img.encode_png()?);
    let caps = generate_captions(p, img, class_name)?;
    trace.evidence = build_evidence(p, &image, class_name, &caps, ctx.artifacts, cfg, memory)?;
    trace.captions = Some(caps);
    let mut known_ids = trace.evidence.evidence_ids();

    let mut heuristic: Option<String> = None;
    let mut pending: Vec<ToolRequest> = Vec::new();
    let mut normals = 0u32;
    for iteration in 1..=cfg.max_iters {
        trace.iterations = iteration;
        let plan = plan(p, &image, class_name, &trace.evidence, heuristic.as_deref())?;
        trace.steps.push(TraceStep::Plan {
            iteration,
            plan: plan.clone(),
        });

        // reflection requests come first, then the plan's own
        let requests: Vec<ToolRequest> = pending.drain(..).chain(plan.tools_to_use.iter().cloned()).collect();
        let mut attachments: Vec<Attachment> = Vec::new();
        for request in requests {
            if attachments.len() == MAX_TOOLS_PER_TURN {
                debug!("dropping tool request {request:?}: turn already has {MAX_TOOLS_PER_TURN} attachments");
                break;
            }
            let applied = request
                .resolve(img.width(), img.height())
                .and_then(|inv| ctx.tools.apply(img, &inv).map(|out| (inv, out)))
                .and_then(|(inv, out)| Ok((inv, ImagePart::png(out.encode_png()?), out)));
            match applied {
                Ok((invocation, part, out)) => {
                    let digest = part.digest();
                    let evidence_id = format!("tool:{}", &digest[..12]);
                    known_ids.push(evidence_id.clone());
                    attachments.push(Attachment {
                        evidence_id: evidence_id.clone(),
                        description: describe(&invocation, &out),
                        image: part,
                    });
                    trace.steps.push(TraceStep::Tool {
                        iteration,
                        invocation,
                        evidence_id,
                        output_digest: digest,
                        width: out.width(),
                        height: out.height(),
                    });
                }
                Err(e) => trace.steps.push(TraceStep::ToolRejected {
                    iteration,
                    request,
                    error: e.to_string(),
                }),
            }
        }

        let mut judgment = reason(p, &image, &attachments, class_name, &plan, &trace.evidence)?;
        let (kept, dropped): (Vec<String>, Vec<String>) =
            judgment.cited_evidence.drain(..).partition(|id| known_ids.contains(id));
        judgment.cited_evidence = kept;
        let verdict = judgment.verdict;
        trace.steps.push(TraceStep::Judgment {
            iteration,
            judgment: judgment.clone(),
            dropped_citations: dropped,
        });

        let mode = match verdict {
            Verdict::Anomalous => {
                finish(trace, Verdict::Anomalous, Termination::Anomalous);
                return Ok(());
            }
            Verdict::Normal => {
                normals += 1;
                if normals >= cfg.consecutive_normals {
                    finish(trace, Verdict::Normal, Termination::ConsecutiveNormals);
                    return Ok(());
                }
                ReflectionMode::ConfirmNormal
            }
            Verdict::Uncertain => {
                normals = 0;
                ReflectionMode::Uncertain
            }
        };
        if iteration < cfg.max_iters {
            let reflection = reflect(
                p,
                &image,
                &attachments,
                class_name,
                &plan,
                &judgment,
                &trace.evidence,
                mode,
            )?;
            heuristic = Some(reflection.refined_heuristic_prompt.clone());
            pending = reflection.tools_to_use.clone();
            trace.steps.push(TraceStep::Reflection {
                iteration,
                mode,
                reflection,
            });
        }
    }

    let m = trace.mean_margin().unwrap_or(0.0);
    let verdict = if m > 0.0 { Verdict::Anomalous } else { Verdict::Normal };
    finish(trace, verdict, Termination::Fallback);
    Ok(())
}
