//! Prompt text, stored as plain-text assets with `{name}` placeholders.

pub const DESCRIPTION: &str = include_str!("../assets/prompts/description.txt");
pub const CANDIDATE_GENERATION: &str = include_str!("../assets/prompts/candidate_generation.txt");
pub const GENERAL_REPORT: &str = include_str!("../assets/prompts/general_report.txt");
pub const COUNTERFACTUAL_REPORT: &str = include_str!("../assets/prompts/counterfactual_report.txt");
pub const PLANNER: &str = include_str!("../assets/prompts/planner.txt");
pub const REASONER: &str = include_str!("../assets/prompts/reasoner.txt");
pub const REFLECTOR: &str = include_str!("../assets/prompts/reflector.txt");
pub const RELATION_JUDGE: &str = include_str!("../assets/prompts/relation_judge.txt");
pub const HARD_NEGATIVE_ENTRY: &str = include_str!("../assets/prompts/hard_negative_entry.txt");
pub const HARD_NEGATIVE_SUMMARY: &str = include_str!("../assets/prompts/hard_negative_summary.txt");

/// Line prefixes that downstream consumers (and the offline model) key on.
pub const CLASS_MARKER: &str = "Object class:";
pub const LEANING_MARKER: &str = "Evidence leaning:";
pub const NOTE_MARKER: &str = "Class calibration note:";

pub const SYSTEM: &str = "You are a careful industrial visual inspection assistant. \
Follow the requested output format exactly.";

/// Substitutes `{key}` placeholders. Unknown placeholders are left in place.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Value following `marker` on the first line that starts with it.
pub fn parse_marker(text: &str, marker: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.trim_start().strip_prefix(marker))
        .map(|rest| rest.trim().to_string())
        .filter(|s| !s.is_empty())
}
