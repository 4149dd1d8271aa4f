//! `ad-agent`: run benchmarks, build memory banks, recompute metrics.
//!
//! Exit codes: 0 success, 1 configuration or other fatal error, 2 when the run
//! finished but some episodes or banks failed.

use std::path::PathBuf;
use std::process::ExitCode;

use ad_agent_core::config::RunConfig;
use ad_agent_core::eval::{
    calibrate, emit_report, load_dataset, read_traces, run_benchmark, summarize, Layout, MetricsSummary, RunOptions,
};
use ad_agent_core::providers::CacheMode;
use ad_agent_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ad-agent",
    version,
    about = "Agentic visual anomaly detection benchmark runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes over a dataset and write traces and metrics.
    Run(RunArgs),
    /// Build the per-class memory banks only.
    Calibrate(RunArgs),
    /// Recompute metrics from existing trace files.
    Metrics {
        #[arg(long)]
        traces: PathBuf,
        /// Also write metrics.json / metrics.csv / metrics_by_class.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "mvtec_dirs")]
    layout: String,
    #[arg(long, default_value_t = 0)]
    shots: usize,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache_mode: Option<CacheMode>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated class subset.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

enum Outcome {
    Clean,
    Partial,
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, RunOptions), Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    if let Some(mode) = args.cache_mode {
        cfg.run.cache_mode = mode;
    }
    if let Some(out) = &args.out {
        cfg.run.out_dir = out.clone();
    }
    cfg.validate()?;
    let opts = RunOptions {
        shots: args.shots,
        out_dir: cfg.run.out_dir.clone(),
        classes: args.classes.clone(),
        cache_mode: cfg.run.cache_mode,
    };
    Ok((cfg, opts))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

fn print_summary(summary: &MetricsSummary) {
    for d in &summary.datasets {
        println!(
            "{} ({}-shot): AUROC {} F1-max {} | {} episodes, {} failed, {} fallback",
            d.dataset,
            d.shots,
            fmt_metric(d.auroc),
            fmt_metric(d.f1_max),
            d.counts.episodes,
            d.counts.failures,
            d.counts.fallbacks
        );
    }
    println!(
        "tokens: {} prompt, {} completion",
        summary.totals.usage.prompt_tokens, summary.totals.usage.completion_tokens
    );
}

fn outcome_of(summary: &MetricsSummary) -> Outcome {
    if summary.has_failures() {
        Outcome::Partial
    } else {
        Outcome::Clean
    }
}

fn run(args: RunArgs) -> Result<Outcome, Error> {
    let (cfg, opts) = load_config(&args)?;
    let layout: Layout = args.layout.parse()?;
    let manifest = load_dataset(&args.dataset, layout)?;
    let result = run_benchmark(&manifest, &cfg, &opts)?;
    emit_report(&result.summary, &opts.out_dir)?;
    print_summary(&result.summary);
    Ok(outcome_of(&result.summary))
}

fn run_calibrate(args: RunArgs) -> Result<Outcome, Error> {
    let (cfg, opts) = load_config(&args)?;
    let layout: Layout = args.layout.parse()?;
    let manifest = load_dataset(&args.dataset, layout)?;
    let mut outcome = Outcome::Clean;
    for status in calibrate(&manifest, &cfg, &opts)? {
        match status.outcome {
            Ok(stored) => println!(
                "{}: {} references, class note {}",
                status.class_name,
                stored.bank.entries.len(),
                match (&stored.bank.class_note, stored.bank.note_enabled) {
                    (None, _) => "not needed",
                    (Some(_), true) => "enabled",
                    (Some(_), false) => "rejected",
                }
            ),
            Err(e) => {
                println!("{}: failed: {e}", status.class_name);
                outcome = Outcome::Partial;
            }
        }
    }
    Ok(outcome)
}

fn metrics(traces: PathBuf, out: Option<PathBuf>) -> Result<Outcome, Error> {
    let records = read_traces(&traces)?;
    if records.is_empty() {
        return Err(Error::Config(format!("no trace records under {}", traces.display())));
    }
    let summary = summarize(&records)?;
    if let Some(out) = out {
        emit_report(&summary, &out)?;
    }
    print_summary(&summary);
    Ok(outcome_of(&summary))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Calibrate(args) => run_calibrate(args),
        Command::Metrics { traces, out } => metrics(traces, out),
    };
    match result {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
