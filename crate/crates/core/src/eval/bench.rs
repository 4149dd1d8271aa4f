//! Benchmark orchestration: memory banks, a bounded episode pool, resumable traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::Serialize;

use super::dataset::{DatasetManifest, ManifestRow, SUPPORTED_SHOTS};
use super::report::{summarize, MetricsSummary, TraceRecord};
use crate::agent::{run_episode, ClassArtifacts, EpisodeContext, EpisodeMemory, EpisodeStatus, EpisodeTrace, Evidence};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memory::{build_memory_bank, load_bank, save_bank, BankProvenance, StoredBank};
use crate::providers::{CacheMode, Providers, Usage};
use crate::templates::{CandidateStore, TemplateStore};
use crate::vision::{ImageBuffer, ToolRunner};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub shots: usize,
    pub out_dir: PathBuf,
    /// Restrict the run to these classes.
    pub classes: Option<Vec<String>>,
    pub cache_mode: CacheMode,
}

/// Progress milestones in the order they happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunEvent {
    BankReady { class_name: String, reused: bool },
    BankFailed { class_name: String },
    Episode { class_name: String, image_id: String },
    Resumed { class_name: String, image_id: String },
}

pub struct BenchmarkOutcome {
    pub summary: MetricsSummary,
    pub events: Vec<RunEvent>,
}

fn check_shots(shots: usize) -> Result<()> {
    if !SUPPORTED_SHOTS.contains(&shots) {
        return Err(Error::Config(format!("unsupported shot count {shots} (0, 1, 2 or 4)")));
    }
    Ok(())
}

fn safe_id(image_id: &str) -> String {
    image_id.replace("..", "_")
}

pub fn trace_dir(out: &Path, dataset: &str, shots: usize) -> PathBuf {
    out.join("traces").join(dataset).join(format!("{shots}-shot"))
}

fn trace_path(out: &Path, dataset: &str, shots: usize, image_id: &str) -> PathBuf {
    trace_dir(out, dataset, shots).join(format!("{}.json", safe_id(image_id)))
}

fn memory_dir(out: &Path, dataset: &str, shots: usize) -> PathBuf {
    out.join("memory").join(dataset).join(format!("{shots}-shot"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Encoding(e.to_string()))?;
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageBuffer::decode(&bytes)
}

fn failed_trace(row: &ManifestRow, error: String) -> EpisodeTrace {
    EpisodeTrace {
        image_id: row.image_id.clone(),
        class_name: row.class_name.clone(),
        status: EpisodeStatus::Failed,
        error: Some(error),
        captions: None,
        evidence: Evidence::default(),
        steps: Vec::new(),
        final_verdict: None,
        termination: None,
        iterations: 0,
        usage: Usage::default(),
    }
}

fn completed_trace(path: &Path) -> Option<TraceRecord> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice::<TraceRecord>(&bytes)
        .ok()
        .filter(|r| r.trace.is_completed())
}

fn selected_classes(manifest: &DatasetManifest, opts: &RunOptions) -> Result<Vec<String>> {
    let all = manifest.classes();
    match &opts.classes {
        None => Ok(all),
        Some(wanted) => {
            if let Some(bad) = wanted.iter().find(|c| !all.contains(c)) {
                return Err(Error::Config(format!(
                    "class `{bad}` is not in dataset {}",
                    manifest.name
                )));
            }
            Ok(all.into_iter().filter(|c| wanted.contains(c)).collect())
        }
    }
}

/// Shared state of one run.
struct Runner<'a> {
    manifest: &'a DatasetManifest,
    config: &'a RunConfig,
    opts: &'a RunOptions,
    providers: Providers,
    tools: ToolRunner,
    candidates: CandidateStore,
    templates: TemplateStore,
    events: Mutex<Vec<RunEvent>>,
}

impl<'a> Runner<'a> {
    fn new(manifest: &'a DatasetManifest, config: &'a RunConfig, opts: &'a RunOptions) -> Result<Self> {
        config.validate()?;
        check_shots(opts.shots)?;
        Ok(Self {
            manifest,
            config,
            opts,
            providers: config.providers(opts.cache_mode)?,
            tools: ToolRunner::new(config.tools.clone()),
            candidates: CandidateStore::default(),
            templates: TemplateStore::default(),
            events: Mutex::new(Vec::new()),
        })
    }

    fn event(&self, e: RunEvent) {
        self.events.lock().unwrap_or_else(|p| p.into_inner()).push(e);
    }

    fn artifacts(&self, class_name: &str) -> Result<ClassArtifacts> {
        ClassArtifacts::prepare(&self.providers, class_name, &self.candidates, &self.templates)
    }

    fn persist_shots(&self, classes: &[String]) -> Result<()> {
        let mut lists: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for c in classes {
            let rows = self.manifest.select_shots(c, self.opts.shots, self.config.run.seed)?;
            lists.insert(c, rows.iter().map(|r| r.image_id.clone()).collect());
        }
        let path = self
            .opts
            .out_dir
            .join("shots")
            .join(&self.manifest.name)
            .join(format!("{}-shot.json", self.opts.shots));
        write_json(
            &path,
            &serde_json::json!({"seed": self.config.run.seed, "shots": lists}),
        )
    }

    /// Loads a matching stored bank or builds and stores a new one.
    fn bank(&self, class_name: &str, artifacts: &ClassArtifacts) -> Result<StoredBank> {
        let shots = self
            .manifest
            .select_shots(class_name, self.opts.shots, self.config.run.seed)?;
        let mut refs = Vec::with_capacity(shots.len());
        for row in shots {
            refs.push((row.image_id.clone(), read_image(&row.path)?));
        }
        let provenance = BankProvenance {
            reference_digests: refs.iter().map(|(_, img)| img.digest()).collect(),
            config_digest: self.config.behaviour_digest()?,
        };
        let dir = memory_dir(&self.opts.out_dir, &self.manifest.name, self.opts.shots);
        let path = dir.join(format!("{class_name}.json"));
        if let Some(stored) = load_bank(&path, &provenance)? {
            self.event(RunEvent::BankReady {
                class_name: class_name.into(),
                reused: true,
            });
            return Ok(stored);
        }
        let ctx = EpisodeContext {
            providers: &self.providers,
            config: &self.config.agent,
            tools: &self.tools,
            artifacts,
        };
        let built = build_memory_bank(&ctx, class_name, &refs)?;
        for t in built.reference_traces.iter() {
            write_json(
                &dir.join(class_name)
                    .join("references")
                    .join(format!("{}.json", safe_id(&t.image_id))),
                t,
            )?;
        }
        for t in built.validation_traces.iter() {
            write_json(
                &dir.join(class_name)
                    .join("validation")
                    .join(format!("{}.json", safe_id(&t.image_id))),
                t,
            )?;
        }
        let stored = StoredBank {
            provenance,
            bank: built.bank,
            weights: built.weights,
        };
        save_bank(&path, &stored)?;
        self.event(RunEvent::BankReady {
            class_name: class_name.into(),
            reused: false,
        });
        Ok(stored)
    }

    fn record(&self, row: &ManifestRow, trace: EpisodeTrace) -> Result<()> {
        let rec = TraceRecord {
            dataset: self.manifest.name.clone(),
            shots: self.opts.shots,
            label: row.label,
            trace,
        };
        write_json(
            &trace_path(&self.opts.out_dir, &self.manifest.name, self.opts.shots, &row.image_id),
            &rec,
        )
    }

    fn run_class(&self, class_name: &str) -> Result<()> {
        let rows: Vec<&ManifestRow> = self.manifest.test_rows(class_name).collect();
        let pending: Vec<&ManifestRow> = rows
            .iter()
            .copied()
            .filter(|r| {
                let path = trace_path(&self.opts.out_dir, &self.manifest.name, self.opts.shots, &r.image_id);
                let done = completed_trace(&path).is_some();
                if done {
                    self.event(RunEvent::Resumed {
                        class_name: class_name.into(),
                        image_id: r.image_id.clone(),
                    });
                }
                !done
            })
            .collect();
        if pending.is_empty() {
            info!("{class_name}: all {} episodes already complete", rows.len());
            return Ok(());
        }

        let prepared = self.artifacts(class_name).and_then(|arts| {
            let memory = if self.opts.shots > 0 {
                match self.bank(class_name, &arts) {
                    Ok(stored) => Some(stored.into_memory(self.config.memory.gamma)),
                    Err(e) => {
                        self.event(RunEvent::BankFailed {
                            class_name: class_name.into(),
                        });
                        return Err(e);
                    }
                }
            } else {
                None
            };
            Ok((arts, memory))
        });
        let (arts, memory) = match prepared {
            Ok(p) => p,
            Err(e) if matches!(e, Error::Config(_)) => return Err(e),
            Err(e) => {
                warn!("{class_name}: preparation failed, {} episodes fail: {e}", pending.len());
                for row in &pending {
                    self.record(row, failed_trace(row, format!("class preparation failed: {e}")))?;
                }
                return Ok(());
            }
        };
        self.run_episodes(class_name, &pending, &arts, memory.as_ref())
    }

    fn run_episodes(
        &self,
        class_name: &str,
        rows: &[&ManifestRow],
        arts: &ClassArtifacts,
        memory: Option<&EpisodeMemory>,
    ) -> Result<()> {
        let ctx = EpisodeContext {
            providers: &self.providers,
            config: &self.config.agent,
            tools: &self.tools,
            artifacts: arts,
        };
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<Error>> = Mutex::new(None);
        let workers = self.config.run.workers.min(rows.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(row) = rows.get(i) else { break };
                    let trace = match read_image(&row.path) {
                        Ok(img) => run_episode(&ctx, &img, &row.image_id, class_name, memory),
                        Err(e) => failed_trace(row, e.to_string()),
                    };
                    self.event(RunEvent::Episode {
                        class_name: class_name.into(),
                        image_id: row.image_id.clone(),
                    });
                    if let Err(e) = self.record(row, trace) {
                        first_error.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                        break;
                    }
                });
            }
        });
        match first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn collect(&self, classes: &[String]) -> Result<Vec<TraceRecord>> {
        let mut out = Vec::new();
        for c in classes {
            for row in self.manifest.test_rows(c) {
                let path = trace_path(&self.opts.out_dir, &self.manifest.name, self.opts.shots, &row.image_id);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push(serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?);
            }
        }
        Ok(out)
    }

    fn into_events(self) -> Vec<RunEvent> {
        self.events.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

/// Runs every test image of the selected classes. With `shots > 0` each
/// class's memory bank is ready before its first episode. Only configuration
/// errors abort; per-episode failures are recorded in traces and counted.
pub fn run_benchmark(manifest: &DatasetManifest, config: &RunConfig, opts: &RunOptions) -> Result<BenchmarkOutcome> {
    let runner = Runner::new(manifest, config, opts)?;
    let classes = selected_classes(manifest, opts)?;
    if opts.shots > 0 {
        runner.persist_shots(&classes)?;
    }
    for c in &classes {
        runner.run_class(c)?;
    }
    let summary = summarize(&runner.collect(&classes)?)?;
    Ok(BenchmarkOutcome {
        summary,
        events: runner.into_events(),
    })
}

/// Result of building one class's bank.
#[derive(Debug)]
pub struct CalibrationStatus {
    pub class_name: String,
    pub outcome: Result<StoredBank>,
}

/// Builds (or reuses) the memory banks of the selected classes without running test episodes.
pub fn calibrate(manifest: &DatasetManifest, config: &RunConfig, opts: &RunOptions) -> Result<Vec<CalibrationStatus>> {
    if opts.shots == 0 {
        return Err(Error::Config("calibration needs --shots 1, 2 or 4".into()));
    }
    let runner = Runner::new(manifest, config, opts)?;
    let classes = selected_classes(manifest, opts)?;
    runner.persist_shots(&classes)?;
    let mut out = Vec::new();
    for c in classes {
        let outcome = runner.artifacts(&c).and_then(|arts| runner.bank(&c, &arts));
        if let Err(e @ Error::Config(_)) = outcome {
            return Err(e);
        }
        out.push(CalibrationStatus { class_name: c, outcome });
    }
    Ok(out)
}
