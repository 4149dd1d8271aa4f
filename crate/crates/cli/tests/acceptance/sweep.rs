//! Criterion 9: K and N reach the episodes and change the reports.

use std::collections::BTreeMap;
use std::fs;

use ad_agent_core::agent::{Termination, TraceStep};
use ad_agent_core::config::{RunConfig, SIMULATED_BASE_URL};
use ad_agent_core::eval::synthetic::{default_fixture, write_fixture};
use ad_agent_core::eval::{
    emit_report, load_dataset, read_traces, run_benchmark, trace_dir, Layout, MetricsSummary, RunOptions,
    CLASS_METRICS_CSV, METRICS_CSV, METRICS_JSON,
};
use ad_agent_core::primitives::Verdict;
use ad_agent_core::providers::CacheMode;

const TOP_K: [usize; 5] = [1, 3, 5, 7, 10];
const NORMALS: [u32; 4] = [1, 2, 3, 4];

fn settings() -> Vec<(usize, u32)> {
    let mut v: Vec<(usize, u32)> = TOP_K.iter().map(|&k| (k, 3)).collect();
    v.extend(NORMALS.iter().filter(|&&n| n != 3).map(|&n| (5, n)));
    v
}

fn well_formed(dir: &std::path::Path, k: usize, n: u32) -> Result<Vec<u8>, String> {
    let tag = format!("K={k} N={n}");
    let bytes = fs::read(dir.join(METRICS_JSON)).map_err(|e| format!("{tag}: {e}"))?;
    let summary: MetricsSummary = serde_json::from_slice(&bytes).map_err(|e| format!("{tag}: {e}"))?;
    ensure!(
        summary.datasets.len() == 1,
        "{tag}: {} datasets",
        summary.datasets.len()
    );
    let d = &summary.datasets[0];
    ensure!(
        d.counts.episodes == 20 && d.counts.failures == 0,
        "{tag}: counts {:?}",
        d.counts
    );
    ensure!(d.classes.len() == 2, "{tag}: {} classes", d.classes.len());
    for v in [d.auroc, d.f1_max]
        .into_iter()
        .chain(d.classes.iter().flat_map(|c| [c.auroc, c.f1_max]))
    {
        let v = v.ok_or(format!("{tag}: undefined metric"))?;
        ensure!((0.0..=1.0).contains(&v), "{tag}: metric {v} out of range");
    }
    let csv = fs::read_to_string(dir.join(METRICS_CSV)).map_err(|e| e.to_string())?;
    ensure!(
        csv.lines().count() == 2,
        "{tag}: metrics.csv has {} lines",
        csv.lines().count()
    );
    let by_class = fs::read_to_string(dir.join(CLASS_METRICS_CSV)).map_err(|e| e.to_string())?;
    ensure!(
        by_class.lines().count() == 3,
        "{tag}: per-class csv has {} lines",
        by_class.lines().count()
    );

    for rec in read_traces(&trace_dir(dir, "fixture", 0)).map_err(|e| e.to_string())? {
        let t = &rec.trace;
        let id = &t.image_id;
        ensure!(t.iterations <= 6, "{tag} {id}: {} iterations", t.iterations);
        let cr = t
            .evidence
            .counterfactual
            .as_ref()
            .ok_or(format!("{tag} {id}: no counterfactual report"))?;
        for cap in &cr.captions {
            // candidate sides hold at least five entries each
            for len in [cap.top_anomaly.len(), cap.top_normal.len()] {
                ensure!(
                    len <= k && len >= k.min(5),
                    "{tag} {id}: {len} matches listed for K={k}"
                );
            }
        }
        let verdicts: Vec<Verdict> = t.judgments().map(|j| j.verdict).collect();
        if t.termination == Some(Termination::ConsecutiveNormals) {
            let tail = verdicts.iter().rev().take_while(|v| **v == Verdict::Normal).count();
            ensure!(tail == n as usize, "{tag} {id}: stopped after {tail} normals");
        }
        let reflections = t
            .steps
            .iter()
            .filter(|s| matches!(s, TraceStep::Reflection { .. }))
            .count();
        ensure!(
            reflections + 1 == verdicts.len(),
            "{tag} {id}: {reflections} reflections"
        );
    }
    Ok(bytes)
}

pub fn check() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("fixture");
    write_fixture(&root, &default_fixture(), 7).map_err(|e| e.to_string())?;
    let manifest = load_dataset(&root, Layout::MvtecDirs).map_err(|e| e.to_string())?;

    let mut reports: BTreeMap<(usize, u32), Vec<u8>> = BTreeMap::new();
    for (k, n) in settings() {
        let mut cfg = RunConfig::default();
        cfg.provider.base_url = SIMULATED_BASE_URL.into();
        cfg.provider.api_key_env = None;
        cfg.run.cache_dir = tmp.path().join("cache");
        cfg.agent.top_k = k;
        cfg.agent.consecutive_normals = n;
        cfg.validate().map_err(|e| e.to_string())?;
        let out = tmp.path().join(format!("k{k}-n{n}"));
        let opts = RunOptions {
            shots: 0,
            out_dir: out.clone(),
            classes: None,
            cache_mode: CacheMode::Record,
        };
        let result = run_benchmark(&manifest, &cfg, &opts).map_err(|e| format!("K={k} N={n}: {e}"))?;
        emit_report(&result.summary, &out).map_err(|e| e.to_string())?;
        reports.insert((k, n), well_formed(&out, k, n)?);
    }

    let keys: Vec<_> = reports.keys().copied().collect();
    for (i, a) in keys.iter().enumerate() {
        for b in &keys[i + 1..] {
            ensure!(
                reports[a] != reports[b],
                "reports for K={} N={} and K={} N={} are identical",
                a.0,
                a.1,
                b.0,
                b.1
            );
        }
    }
    Ok(())
}
