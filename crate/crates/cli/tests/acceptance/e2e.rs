//! Criterion 6: the CLI reproduces `metrics.json` byte for byte from a
//! recorded cache, with network access replaced by a denying transport.

use std::fs;
use std::path::Path;
use std::process::Command;

use ad_agent_core::eval::synthetic::{default_fixture, write_fixture};
use ad_agent_core::eval::{MetricsSummary, METRICS_JSON};

const REPEATS: usize = 3;

fn ad_agent(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ad-agent"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.code() == Some(0),
        "ad-agent {} exited with {:?}: {}{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn run(dataset: &Path, config: &Path, out: &Path, shots: usize, mode: &str) -> Result<Vec<u8>, String> {
    ad_agent(&[
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--layout",
        "mvtec_dirs",
        "--shots",
        &shots.to_string(),
        "--config",
        config.to_str().unwrap(),
        "--cache-mode",
        mode,
        "--out",
        out.to_str().unwrap(),
    ])?;
    fs::read(out.join(METRICS_JSON)).map_err(|e| e.to_string())
}

pub fn check() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = tmp.path().join("fixture");
    write_fixture(&dataset, &default_fixture(), 7).map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "[provider]\nbase_url = \"simulated://\"\n\n[run]\nworkers = 4\ncache_dir = {:?}\n",
            tmp.path().join("cache").to_str().unwrap()
        ),
    )
    .map_err(|e| e.to_string())?;

    for shots in [0, 1] {
        let recorded = run(
            &dataset,
            &config,
            &tmp.path().join(format!("record-{shots}")),
            shots,
            "record",
        )?;
        let summary: MetricsSummary = serde_json::from_slice(&recorded).map_err(|e| e.to_string())?;
        ensure!(
            summary.totals.episodes == 20,
            "{shots}-shot: {} episodes",
            summary.totals.episodes
        );
        ensure!(
            summary.totals.failures == 0,
            "{shots}-shot: {} failures",
            summary.totals.failures
        );
        for i in 0..REPEATS {
            let out = tmp.path().join(format!("replay-{shots}-{i}"));
            let replayed = run(&dataset, &config, &out, shots, "replay-strict")?;
            ensure!(replayed == recorded, "{shots}-shot replay {i}: metrics.json differs");
        }
    }
    Ok(())
}
