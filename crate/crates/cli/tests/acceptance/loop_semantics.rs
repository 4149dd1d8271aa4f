//! Criterion 5: termination rules on scripted transcripts, pinned by golden traces.

use std::fs;
use std::path::PathBuf;

use ad_agent_core::agent::{AgentConfig, EpisodeTrace, Termination, TraceStep};
use ad_agent_core::primitives::Verdict;

use crate::scripted::{judgment, script, Harness};

/// Set to regenerate the golden files instead of comparing against them.
const BLESS_VAR: &str = "AD_AGENT_BLESS";

struct Scenario {
    name: &'static str,
    verdicts: &'static [&'static str],
    expect_termination: Termination,
    expect_iterations: u32,
}

const SCENARIOS: [Scenario; 4] = [
    Scenario {
        name: "anomalous_stops",
        verdicts: &["uncertain", "anomalous"],
        expect_termination: Termination::Anomalous,
        expect_iterations: 2,
    },
    Scenario {
        name: "three_normals",
        verdicts: &["normal", "normal", "normal"],
        expect_termination: Termination::ConsecutiveNormals,
        expect_iterations: 3,
    },
    Scenario {
        name: "uncertain_resets",
        verdicts: &["normal", "normal", "uncertain", "normal", "normal", "normal"],
        expect_termination: Termination::ConsecutiveNormals,
        expect_iterations: 6,
    },
    Scenario {
        name: "max_iters_fallback",
        verdicts: &["normal", "normal", "uncertain", "normal", "normal", "uncertain"],
        expect_termination: Termination::Fallback,
        expect_iterations: 6,
    },
];

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn run(s: &Scenario) -> (EpisodeTrace, usize) {
    let chat = script();
    for v in s.verdicts {
        chat.push("judgment", judgment(v));
    }
    let trace = Harness::new(&chat, AgentConfig::default()).run(None);
    (trace, chat.calls_for("judgment"))
}

fn serialize(trace: &EpisodeTrace) -> Result<String, String> {
    serde_json::to_string_pretty(trace)
        .map(|s| s + "\n")
        .map_err(|e| e.to_string())
}

fn check_semantics(s: &Scenario, trace: &EpisodeTrace, judged: usize) -> Result<(), String> {
    let name = s.name;
    ensure!(trace.is_completed(), "{name}: episode failed: {:?}", trace.error);
    ensure!(
        trace.termination == Some(s.expect_termination),
        "{name}: terminated by {:?}",
        trace.termination
    );
    ensure!(
        trace.iterations == s.expect_iterations,
        "{name}: {} iterations",
        trace.iterations
    );
    ensure!(judged == s.verdicts.len(), "{name}: {judged} judgments requested");

    let verdicts: Vec<Verdict> = trace.judgments().map(|j| j.verdict).collect();
    let last = *verdicts.last().unwrap();
    let expected = match s.expect_termination {
        Termination::Anomalous => Verdict::Anomalous,
        Termination::ConsecutiveNormals => Verdict::Normal,
        Termination::Fallback => {
            if trace.mean_margin().unwrap() > 0.0 {
                Verdict::Anomalous
            } else {
                Verdict::Normal
            }
        }
    };
    ensure!(
        trace.final_verdict == Some(expected),
        "{name}: final verdict {:?}",
        trace.final_verdict
    );
    if s.expect_termination == Termination::Anomalous {
        ensure!(
            last == Verdict::Anomalous,
            "{name}: did not stop on the anomalous judgment"
        );
    }
    if s.expect_termination == Termination::ConsecutiveNormals {
        // exactly N trailing normals, and no earlier run of N
        let n = AgentConfig::default().consecutive_normals as usize;
        let tail = verdicts.iter().rev().take_while(|v| **v == Verdict::Normal).count();
        ensure!(tail == n, "{name}: stopped after {tail} consecutive normals");
    }
    // every non-final iteration reflects
    let reflections = trace
        .steps
        .iter()
        .filter(|st| matches!(st, TraceStep::Reflection { .. }))
        .count();
    ensure!(reflections == verdicts.len() - 1, "{name}: {reflections} reflections");
    Ok(())
}

pub fn check() -> Result<(), String> {
    let bless = std::env::var_os(BLESS_VAR).is_some();
    for s in &SCENARIOS {
        let (trace, judged) = run(s);
        check_semantics(s, &trace, judged)?;
        let text = serialize(&trace)?;
        let again = serialize(&run(s).0)?;
        ensure!(text == again, "{}: trace differs between two runs", s.name);

        let path = golden_dir().join(format!("{}.json", s.name));
        if bless {
            fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
            fs::write(&path, &text).map_err(|e| e.to_string())?;
            continue;
        }
        let golden = fs::read_to_string(&path)
            .map_err(|e| format!("{}: {e} (run with {BLESS_VAR}=1 to create it)", path.display()))?;
        ensure!(golden == text, "{}: trace differs from {}", s.name, path.display());
    }
    Ok(())
}
