//! Scripted provider setup shared by the loop and gating criteria.

use std::sync::Arc;

use ad_agent_core::agent::{run_episode, AgentConfig, ClassArtifacts, EpisodeContext, EpisodeMemory, EpisodeTrace};
use ad_agent_core::providers::scripted::{ScriptedChat, TEXT_KEY};
use ad_agent_core::providers::simulated::HashEmbedder;
use ad_agent_core::providers::{ModelSet, Providers};
use ad_agent_core::templates::{CandidateStore, TemplateStore};
use ad_agent_core::vision::{ImageBuffer, ToolDefaults, ToolRunner};
use serde_json::{json, Value};

pub const CLASS: &str = "screw";

pub fn providers(chat: Arc<ScriptedChat>) -> Providers {
    let models = ModelSet {
        primary: "primary".into(),
        auxiliary: "aux".into(),
        text_embedding: "te".into(),
        image_embedding: "ie".into(),
    };
    Providers::new(chat, Arc::new(HashEmbedder), models)
}

pub fn image(seed: u32) -> ImageBuffer {
    ImageBuffer::from_fn(48, 48, 3, |x, y, c| (x * 5 + y * 3 + c as u32 * 20 + seed * 7) as u8).unwrap()
}

/// A chat script with fixed captions, candidates, plans and reflections;
/// judgments are pushed per scenario.
pub fn script() -> Arc<ScriptedChat> {
    let chat = Arc::new(ScriptedChat::new());
    chat.fallback(
        "captions",
        json!({"captions": ["a grey screw on a table", "screw thread intact", "screw head centered"]}),
    );
    chat.fallback(
        "candidates",
        json!({
            "anomaly": ["screw with bent thread", "screw with scratch on head", "screw with rust spot",
                        "screw with missing tip", "screw with crack"],
            "normal": ["screw with intact thread", "screw with clean head", "screw with even grey color",
                       "screw with sharp tip", "screw lying flat"],
        }),
    );
    chat.fallback_raw(TEXT_KEY, "The captions agree.");
    chat.fallback(
        "plan",
        json!({"potential_anomalies": ["scratch"], "heuristic_prompt": "check the head", "tools_to_use": []}),
    );
    chat.fallback(
        "reflection",
        json!({"missing_evidence": ["close view"], "ambiguous_evidence": [],
               "refined_heuristic_prompt": "look closer", "tools_to_use": []}),
    );
    chat
}

pub fn judgment(verdict: &str) -> Value {
    json!({"verdict": verdict, "reason": format!("looks {verdict}"), "cited_evidence": ["cr.mean_margin"]})
}

pub struct Harness {
    pub providers: Providers,
    pub artifacts: ClassArtifacts,
    pub tools: ToolRunner,
    pub config: AgentConfig,
}

impl Harness {
    pub fn new(chat: &Arc<ScriptedChat>, config: AgentConfig) -> Self {
        let providers = providers(chat.clone());
        let artifacts =
            ClassArtifacts::prepare(&providers, CLASS, &CandidateStore::default(), &TemplateStore::default()).unwrap();
        Self {
            providers,
            artifacts,
            tools: ToolRunner::new(ToolDefaults::default()),
            config,
        }
    }

    pub fn ctx(&self) -> EpisodeContext<'_> {
        EpisodeContext {
            providers: &self.providers,
            config: &self.config,
            tools: &self.tools,
            artifacts: &self.artifacts,
        }
    }

    pub fn run(&self, memory: Option<&EpisodeMemory>) -> EpisodeTrace {
        run_episode(&self.ctx(), &image(0), "img-0", CLASS, memory)
    }
}
