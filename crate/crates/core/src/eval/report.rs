//! Metric aggregation over episode traces and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::agent::{EpisodeTrace, Termination};
use crate::error::{Error, Result};
use crate::eval::metrics::{auroc, f1_max};
use crate::primitives::{mean, BinaryLabel, ScoredRecord};
use crate::providers::Usage;

/// An episode trace with the ground truth needed to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub dataset: String,
    pub shots: usize,
    pub label: BinaryLabel,
    pub trace: EpisodeTrace,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: usize,
    pub completed: usize,
    pub failures: usize,
    pub fallbacks: usize,
    pub usage: Usage,
}

impl Counts {
    fn add(&mut self, r: &TraceRecord) {
        self.episodes += 1;
        if r.trace.is_completed() {
            self.completed += 1;
        } else {
            self.failures += 1;
        }
        if r.trace.termination == Some(Termination::Fallback) {
            self.fallbacks += 1;
        }
        self.usage += r.trace.usage;
    }

    fn merge(&mut self, o: &Counts) {
        self.episodes += o.episodes;
        self.completed += o.completed;
        self.failures += o.failures;
        self.fallbacks += o.fallbacks;
        self.usage += o.usage;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub auroc: Option<f64>,
    pub f1_max: Option<f64>,
    pub counts: Counts,
    /// Why a metric is missing, e.g. a single-label class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub shots: usize,
    /// Mean of the defined per-class values.
    pub auroc: Option<f64>,
    pub f1_max: Option<f64>,
    pub counts: Counts,
    pub classes: Vec<ClassMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub datasets: Vec<DatasetMetrics>,
    pub totals: Counts,
}

impl MetricsSummary {
    pub fn has_failures(&self) -> bool {
        self.totals.failures > 0
    }
}

fn class_metrics(class_name: &str, records: &[&TraceRecord]) -> Result<ClassMetrics> {
    let mut counts = Counts::default();
    let mut scored = Vec::new();
    for r in records {
        counts.add(r);
        if let (true, Some(verdict), Some(m)) = (r.trace.is_completed(), r.trace.final_verdict, r.trace.mean_margin()) {
            scored.push(ScoredRecord::new(r.trace.image_id.clone(), r.label, verdict, m)?);
        }
    }
    let mut notes = Vec::new();
    let mut keep = |m: Result<f64>| match m {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(why)) => {
            notes.push(why);
            None
        }
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let a = keep(auroc(&scored));
    let f = keep(f1_max(&scored));
    Ok(ClassMetrics {
        class_name: class_name.to_string(),
        auroc: a,
        f1_max: f,
        counts,
        notes,
    })
}

/// Per-class metrics over completed episodes only, averaged into dataset rows
/// keyed by (dataset, shots).
pub fn summarize(records: &[TraceRecord]) -> Result<MetricsSummary> {
    let mut groups: BTreeMap<(&str, usize), BTreeMap<&str, Vec<&TraceRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.as_str(), r.shots))
            .or_default()
            .entry(r.trace.class_name.as_str())
            .or_default()
            .push(r);
    }
    let mut summary = MetricsSummary::default();
    for ((dataset, shots), classes) in groups {
        let mut rows = Vec::new();
        let mut counts = Counts::default();
        for (class_name, mut recs) in classes {
            recs.sort_by(|a, b| a.trace.image_id.cmp(&b.trace.image_id));
            let m = class_metrics(class_name, &recs)?;
            counts.merge(&m.counts);
            rows.push(m);
        }
        let avg = |f: fn(&ClassMetrics) -> Option<f64>| mean(&rows.iter().filter_map(f).collect::<Vec<_>>());
        summary.totals.merge(&counts);
        summary.datasets.push(DatasetMetrics {
            dataset: dataset.to_string(),
            shots,
            auroc: avg(|c| c.auroc),
            f1_max: avg(|c| c.f1_max),
            counts,
            classes: rows,
        });
    }
    Ok(summary)
}

/// Every trace record found under `dir`, in path order. Files that are not
/// trace records are skipped with a warning.
pub fn read_traces(dir: &Path) -> Result<Vec<TraceRecord>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match serde_json::from_slice::<TraceRecord>(&bytes) {
            Ok(r) => out.push(r),
            Err(e) => warn!("skipping {}: not a trace record ({e})", path.display()),
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DatasetRow<'a> {
    dataset: &'a str,
    shots: usize,
    auroc: Option<f64>,
    f1_max: Option<f64>,
}

#[derive(Serialize)]
struct ClassRow<'a> {
    dataset: &'a str,
    shots: usize,
    class: &'a str,
    auroc: Option<f64>,
    f1_max: Option<f64>,
    episodes: usize,
    completed: usize,
    failures: usize,
    fallbacks: usize,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Encoding(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Encoding(e.to_string()))
}

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CLASS_METRICS_CSV: &str = "metrics_by_class.csv";

/// Writes `metrics.json`, a dataset-level `metrics.csv` and `metrics_by_class.csv`.
pub fn emit_report(summary: &MetricsSummary, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut json = serde_json::to_vec_pretty(summary).map_err(|e| Error::Encoding(e.to_string()))?;
    json.push(b'\n');
    write(&out.join(METRICS_JSON), &json)?;
    let rows = summary.datasets.iter().map(|d| DatasetRow {
        dataset: &d.dataset,
        shots: d.shots,
        auroc: d.auroc,
        f1_max: d.f1_max,
    });
    write(&out.join(METRICS_CSV), &csv_bytes(rows)?)?;
    let class_rows = summary.datasets.iter().flat_map(|d| {
        d.classes.iter().map(move |c| ClassRow {
            dataset: &d.dataset,
            shots: d.shots,
            class: &c.class_name,
            auroc: c.auroc,
            f1_max: c.f1_max,
            episodes: c.counts.episodes,
            completed: c.counts.completed,
            failures: c.counts.failures,
            fallbacks: c.counts.fallbacks,
        })
    });
    write(&out.join(CLASS_METRICS_CSV), &csv_bytes(class_rows)?)
}
