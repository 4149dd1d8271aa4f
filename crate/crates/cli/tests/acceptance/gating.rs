//! Criterion 7: the class note survives only when re-validation fixes a
//! failed reference without breaking a correct one.

use ad_agent_core::agent::AgentConfig;
use ad_agent_core::memory::build_memory_bank;
use serde_json::json;

use crate::scripted::{image, judgment, script, Harness, CLASS};

const NOTE: &str = "Glare on the head is normal.";

struct Case {
    name: &'static str,
    /// Zero-shot outcome per reference: true when judged normal.
    before: &'static [bool],
    after: &'static [bool],
    accept: bool,
}

const CASES: [Case; 4] = [
    Case {
        name: "fixes the failure",
        before: &[false, true],
        after: &[true, true],
        accept: true,
    },
    Case {
        name: "fixes one of two",
        before: &[false, false, true],
        after: &[true, false, true],
        accept: true,
    },
    Case {
        name: "fixes but regresses",
        before: &[false, false, true],
        after: &[true, true, false],
        accept: false,
    },
    Case {
        name: "fixes nothing",
        before: &[false, true],
        after: &[false, true],
        accept: false,
    },
];

fn push_episode(chat: &ad_agent_core::providers::scripted::ScriptedChat, normal: bool) {
    if normal {
        for _ in 0..AgentConfig::default().consecutive_normals {
            chat.push("judgment", judgment("normal"));
        }
    } else {
        chat.push("judgment", judgment("anomalous"));
    }
}

fn run_case(case: &Case) -> Result<(), String> {
    let name = case.name;
    let chat = script();
    for &ok in case.before.iter().chain(case.after) {
        push_episode(&chat, ok);
    }
    chat.fallback("relations", json!({"relations": [{"index": 0, "relation": "fit"}]}));
    chat.fallback(
        "hard_normal_entry",
        json!({"misleading_cues": ["glare"], "explanation": "glare looked like a scratch"}),
    );
    chat.push("class_note", json!({"note": NOTE}));

    let h = Harness::new(&chat, AgentConfig::default());
    let refs: Vec<(String, _)> = (0..case.before.len())
        .map(|i| (format!("ref-{i}"), image(i as u32 + 1)))
        .collect();
    let built = build_memory_bank(&h.ctx(), CLASS, &refs).map_err(|e| format!("{name}: {e}"))?;

    let gate = built
        .bank
        .validation
        .clone()
        .ok_or(format!("{name}: no validation ran"))?;
    ensure!(gate.before == case.before, "{name}: before {:?}", gate.before);
    ensure!(gate.after == case.after, "{name}: after {:?}", gate.after);
    ensure!(gate.accepted == case.accept, "{name}: accepted = {}", gate.accepted);
    ensure!(
        built.bank.note_enabled == case.accept,
        "{name}: note_enabled = {}",
        built.bank.note_enabled
    );
    ensure!(
        built.bank.class_note.as_deref() == Some(NOTE),
        "{name}: drafted note not kept for inspection"
    );
    let misjudged = case.before.iter().filter(|ok| !**ok).count();
    ensure!(
        built.bank.hard_normals.len() == misjudged,
        "{name}: {} hard normals",
        built.bank.hard_normals.len()
    );

    // re-validation sees the note
    let with_note = chat
        .calls()
        .into_iter()
        .filter(|c| c.schema == "judgment" && c.prompt.contains(NOTE))
        .count();
    ensure!(with_note > 0, "{name}: re-validation never saw the note");

    // later episodes see it only if accepted
    let memory = std::sync::Arc::new(built.bank).context(std::sync::Arc::new(built.weights), 0.8);
    ensure!(
        memory.class_note.is_some() == case.accept,
        "{name}: episode memory note = {:?}",
        memory.class_note
    );
    Ok(())
}

pub fn check() -> Result<(), String> {
    for case in &CASES {
        run_case(case)?;
    }

    // no note is drafted when every reference was already correct
    let chat = script();
    push_episode(&chat, true);
    chat.fallback("relations", json!({"relations": []}));
    let h = Harness::new(&chat, AgentConfig::default());
    let built = build_memory_bank(&h.ctx(), CLASS, &[("ref-0".into(), image(1))]).map_err(|e| e.to_string())?;
    ensure!(
        built.bank.validation.is_none() && !built.bank.note_enabled,
        "note drafted without a failure"
    );
    ensure!(
        chat.calls_for("class_note") == 0,
        "class note requested without a failure"
    );
    Ok(())
}
