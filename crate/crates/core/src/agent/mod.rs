//! The plan / reason / reflect inspection loop.

mod episode;
mod evidence;
mod stages;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use episode::{run_episode, ClassArtifacts, EpisodeContext, EpisodeMemory};
pub use evidence::{build_evidence, Evidence};
pub use stages::{plan, reason, reflect, Attachment};

use crate::error::{Error, Result};
use crate::primitives::Verdict;
use crate::providers::{StructuredOutput, Usage};
use crate::templates::CaptionSet;
use crate::vision::{ToolInvocation, ToolKind, ToolRequest};

/// Enhancement tools attached to one reasoning turn, at most.
pub const MAX_TOOLS_PER_TURN: usize = 2;

/// Loop hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Candidate matches reported per side and caption.
    pub top_k: usize,
    /// Consecutive normal judgments needed to stop.
    pub consecutive_normals: u32,
    pub max_iters: u32,
    /// Temperature of calibrated candidate matching.
    pub tau_cand: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            consecutive_normals: 3,
            max_iters: 6,
            tau_cand: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.top_k) {
            return Err(Error::Config(format!("top_k must be in 1..=10, got {}", self.top_k)));
        }
        if !(1..=4).contains(&self.consecutive_normals) {
            return Err(Error::Config(format!(
                "consecutive_normals must be in 1..=4, got {}",
                self.consecutive_normals
            )));
        }
        if self.max_iters < self.consecutive_normals {
            return Err(Error::Config(format!(
                "max_iters ({}) cannot be below consecutive_normals ({})",
                self.max_iters, self.consecutive_normals
            )));
        }
        if !(self.tau_cand.is_finite() && self.tau_cand > 0.0) {
            return Err(Error::Config(format!("tau_cand must be > 0, got {}", self.tau_cand)));
        }
        Ok(())
    }
}

fn string_list() -> Value {
    json!({"type": "array", "items": {"type": "string"}})
}

fn tool_list() -> Value {
    let names: Vec<&str> = ToolKind::ALL.iter().map(|t| t.as_str()).collect();
    json!({
        "type": "array",
        "maxItems": MAX_TOOLS_PER_TURN,
        "items": {
            "type": "object",
            "properties": {
                "tool": {"type": "string", "enum": names},
                "region": {
                    "anyOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "properties": {
                                "x": {"type": "number"}, "y": {"type": "number"},
                                "width": {"type": "number"}, "height": {"type": "number"}
                            },
                            "required": ["x", "y", "width", "height"],
                            "additionalProperties": false
                        }
                    ]
                }
            },
            "required": ["tool", "region"],
            "additionalProperties": false
        }
    })
}

fn check_tools(tools: &[ToolRequest]) -> Result<(), String> {
    if tools.len() > MAX_TOOLS_PER_TURN {
        return Err(format!(
            "at most {MAX_TOOLS_PER_TURN} tools per turn, got {}",
            tools.len()
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectionPlan {
    pub potential_anomalies: Vec<String>,
    pub heuristic_prompt: String,
    pub tools_to_use: Vec<ToolRequest>,
}

impl StructuredOutput for InspectionPlan {
    const NAME: &'static str = "plan";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "potential_anomalies": string_list(),
                "heuristic_prompt": {"type": "string"},
                "tools_to_use": tool_list()
            },
            "required": ["potential_anomalies", "heuristic_prompt", "tools_to_use"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        check_tools(&self.tools_to_use)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub verdict: Verdict,
    pub reason: String,
    pub cited_evidence: Vec<String>,
}

impl StructuredOutput for Judgment {
    const NAME: &'static str = "judgment";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "verdict": {"type": "string", "enum": ["normal", "anomalous", "uncertain"]},
                "reason": {"type": "string"},
                "cited_evidence": string_list()
            },
            "required": ["verdict", "reason", "cited_evidence"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.reason.trim().is_empty() {
            return Err("reason must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub missing_evidence: Vec<String>,
    pub ambiguous_evidence: Vec<String>,
    pub refined_heuristic_prompt: String,
    pub tools_to_use: Vec<ToolRequest>,
}

impl StructuredOutput for Reflection {
    const NAME: &'static str = "reflection";

    fn schema() -> Value {
        json!({
            "type": "object",
            "properties": {
                "missing_evidence": string_list(),
                "ambiguous_evidence": string_list(),
                "refined_heuristic_prompt": {"type": "string"},
                "tools_to_use": tool_list()
            },
            "required": ["missing_evidence", "ambiguous_evidence", "refined_heuristic_prompt", "tools_to_use"],
            "additionalProperties": false
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.missing_evidence.is_empty() && self.ambiguous_evidence.is_empty() {
            return Err("name at least one missing or ambiguous piece of evidence".into());
        }
        check_tools(&self.tools_to_use)
    }
}

/// Why a reflection pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionMode {
    /// The judgment was uncertain.
    Uncertain,
    /// The judgment was normal but more confirmations are required.
    ConfirmNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Anomalous,
    ConsecutiveNormals,
    /// Iteration cap reached; the verdict follows the sign of the mean margin.
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceStep {
    Plan {
        iteration: u32,
        plan: InspectionPlan,
    },
    Tool {
        iteration: u32,
        invocation: ToolInvocation,
        evidence_id: String,
        output_digest: String,
        width: u32,
        height: u32,
    },
    ToolRejected {
        iteration: u32,
        request: ToolRequest,
        error: String,
    },
    Judgment {
        iteration: u32,
        judgment: Judgment,
        dropped_citations: Vec<String>,
    },
    Reflection {
        iteration: u32,
        mode: ReflectionMode,
        reflection: Reflection,
    },
}

/// Full audit record of one image's episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub image_id: String,
    pub class_name: String,
    pub status: EpisodeStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub captions: Option<CaptionSet>,
    pub evidence: Evidence,
    pub steps: Vec<TraceStep>,
    #[serde(default)]
    pub final_verdict: Option<Verdict>,
    #[serde(default)]
    pub termination: Option<Termination>,
    pub iterations: u32,
    pub usage: Usage,
}

impl EpisodeTrace {
    pub fn is_completed(&self) -> bool {
        self.status == EpisodeStatus::Completed
    }

    pub fn mean_margin(&self) -> Option<f64> {
        self.evidence.counterfactual.as_ref().map(|c| c.mean_margin)
    }

    pub fn judgments(&self) -> impl Iterator<Item = &Judgment> {
        self.steps.iter().filter_map(|s| match s {
            TraceStep::Judgment { judgment, .. } => Some(judgment),
            _ => None,
        })
    }

    /// Reason of the last judgment, if any.
    pub fn last_reason(&self) -> Option<&str> {
        self.judgments().last().map(|j| j.reason.as_str())
    }
}
