use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use distfid::backends::replay::load_path;
use distfid::backends::StoreError;
use distfid::dist::{make_distribution, Alphabet, DistError, PromptKind, TaskDistribution};
use distfid::harness::{
    analyze_transcript, first_token_study, layer_study, prior_study, quota_analysis, run_experiment,
    temperature_sweep, ExperimentConfig, HarnessError, PriorResult, QuotaEntry, RunOptions, StudyReport,
};
use distfid::layers::{self, LayerError};
use distfid::report::{sha256_hex, write_report, ReportError};

#[derive(Parser)]
#[command(name = "distfid", version, about = "Token-level sampling fidelity diagnostics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's output_dir, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every synthetic backend.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for trial generation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run every study the config enables.
    Run,
    /// Recompute reports from stored transcripts.
    Replay {
        #[arg(long)]
        store: PathBuf,
    },
    /// Quota-compensation regression over stored transcripts.
    Quota {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Up-layer and convergence analysis of a layer dump.
    Layers {
        #[arg(long)]
        dump: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = layers::DEFAULT_JUMP_FRACTION)]
        jump_fraction: f64,
    },
    /// Temperature sweep of every backend.
    Sweep {
        /// Comma-separated temperatures; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Task id; defaults to the config's sweep task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Unconditioned sampling against the uniform distribution.
    Prior {
        /// Comma-separated labels; defaults to the first task's alphabet.
        #[arg(long, value_delimiter = ',')]
        alphabet: Vec<String>,
    },
    /// First-token e-score over a prompt corpus.
    FirstToken {
        /// Corpus file; defaults to the config's first_token_corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Lint a config, a transcript store or a layer dump.
    Validate {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TaskArgs {
    /// Comma-separated task probabilities.
    #[arg(long, value_delimiter = ',', required = true)]
    probs: Vec<f64>,
    /// Comma-separated labels; defaults to 1..=n.
    #[arg(long, value_delimiter = ',')]
    alphabet: Vec<String>,
}

impl TaskArgs {
    fn distribution(&self) -> Result<TaskDistribution, CliError> {
        let alphabet = if self.alphabet.is_empty() {
            Alphabet::numeric(1, self.probs.len() as u32)?
        } else {
            Alphabet::from_labels(&self.alphabet)?
        };
        Ok(make_distribution(alphabet, self.probs.clone())?)
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl CliError {
    fn record(&self) -> serde_json::Value {
        let (kind, line) = match self {
            CliError::Usage(_) => ("UsageError", None),
            CliError::Harness(HarnessError::Config(_)) => ("ConfigError", None),
            CliError::Harness(HarnessError::CorpusFormat { line, .. }) => ("FormatError", Some(*line)),
            CliError::Harness(HarnessError::AllTrialsFailed { .. }) => ("AllTrialsFailed", None),
            CliError::Harness(HarnessError::InsufficientSteps) => ("InsufficientSteps", None),
            CliError::Harness(_) => ("HarnessError", None),
            CliError::Report(ReportError::EmptyInput(_)) => ("EmptyInput", None),
            CliError::Report(_) => ("ReportError", None),
            CliError::Layer(LayerError::Format { line, .. }) => ("FormatError", Some(*line)),
            CliError::Layer(LayerError::IncompleteGrid { .. }) => ("IncompleteGrid", None),
            CliError::Layer(_) => ("LayerError", None),
            CliError::Store(StoreError::Parse { line, .. }) => ("FormatError", Some(*line)),
            CliError::Store(StoreError::SchemaVersionMismatch { line, .. }) => ("SchemaVersionMismatch", Some(*line)),
            CliError::Store(_) => ("StoreError", None),
            CliError::Dist(_) => ("DistributionError", None),
        };
        let mut err = json!({ "kind": kind, "message": self.to_string() });
        if let Some(l) = line {
            err["line"] = json!(l);
        }
        json!({ "error": err })
    }
}

struct Ctx {
    global: Global,
}

impl Ctx {
    fn config(&self) -> Result<(ExperimentConfig, String), CliError> {
        let path = self
            .global
            .config
            .as_deref()
            .ok_or_else(|| CliError::Usage("--config is required".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        let bytes = std::fs::read(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut digest_input = bytes;
        if let Some(seed) = self.global.seed {
            cfg.seed = Some(seed);
            digest_input.extend_from_slice(format!("\nseed={seed}").as_bytes());
        }
        cfg.apply_seed();
        Ok((cfg, sha256_hex(&digest_input)))
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.global
            .out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn options(&self, cfg: &ExperimentConfig, transcripts: Option<PathBuf>) -> RunOptions {
        RunOptions {
            jobs: self.global.jobs,
            transcript_dir: transcripts,
            thresholds: cfg.thresholds,
        }
    }
}

fn started() -> (u64, Instant) {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default();
    (secs, Instant::now())
}

fn finish(report: &StudyReport, digest: &str, out: &Path, t0: (u64, Instant)) -> Result<serde_json::Value, CliError> {
    let full = write_report(report, digest, out, Some((t0.0, t0.1.elapsed().as_secs_f64())))?;
    Ok(json!({
        "report": out.join("report.json"),
        "cells": full.studies.cells.len(),
        "failures": full.manifest.failures.len(),
    }))
}

fn cmd_run(ctx: &Ctx) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let (cfg, digest) = ctx.config()?;
    let out = ctx.out_dir(Some(&cfg));
    let report = run_experiment(&cfg, &ctx.options(&cfg, Some(out.join("transcripts"))))?;
    finish(&report, &digest, &out, t0)
}

fn cmd_replay(ctx: &Ctx, store: &Path) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let (cfg, digest) = ctx.config()?;
    load_path(store)?;
    let out = ctx.out_dir(Some(&cfg));
    let report = run_experiment(&cfg.as_replay(store), &ctx.options(&cfg, None))?;
    finish(&report, &digest, &out, t0)
}

/// Groups transcripts by the cell part of their trial id.
fn cell_of(trial_id: &str) -> (&str, &str) {
    let cell = trial_id.rsplit_once('/').map_or(trial_id, |(c, _)| c);
    cell.split_once('/').unwrap_or((cell, ""))
}

fn cmd_quota(ctx: &Ctx, store: &Path, task: &TaskArgs) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let task = task.distribution()?;
    let transcripts = load_path(store)?;
    let mut groups: Vec<((String, String), Vec<_>)> = Vec::new();
    for t in &transcripts {
        let (m, c) = cell_of(&t.trial_id);
        let key = (m.to_string(), c.to_string());
        let rec = analyze_transcript(t, &task);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(rec),
            None => groups.push((key, vec![rec])),
        }
    }
    if groups.is_empty() {
        return Err(CliError::Usage(format!("{} holds no transcripts", store.display())));
    }
    let mut report = StudyReport::default();
    for ((model, cell), trials) in groups {
        let usable: Vec<_> = trials.into_iter().filter(|t| !t.steps.is_empty()).collect();
        match quota_analysis(&usable, &task) {
            Ok(result) => report.quota.push(QuotaEntry {
                model,
                task: cell,
                result,
            }),
            Err(e) => report.failures.push(distfid::harness::StudyFailure {
                study: "quota".into(),
                model,
                task: cell,
                error: e.to_string(),
            }),
        }
    }
    if report.quota.is_empty() {
        return Err(HarnessError::InsufficientSteps.into());
    }
    let digest = sha256_hex(format!("quota {:?}", task.probs()).as_bytes());
    let out = ctx.out_dir(None);
    let summary: Vec<_> = report
        .quota
        .iter()
        .map(|q| json!({"model": q.model, "task": q.task, "pairs": q.result.pairs, "pooled": q.result.pooled}))
        .collect();
    finish(&report, &digest, &out, t0)?;
    Ok(json!({ "report": out.join("report.json"), "quota": summary }))
}

fn cmd_layers(ctx: &Ctx, dump: &Path, task: &TaskArgs, jump_fraction: f64) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let dist = task.distribution()?;
    let study = layer_study(dump, &dist, "cli", Some(jump_fraction), &[])?;
    let summary = json!({
        "model": study.model,
        "prompt_id": study.prompt_id,
        "up_layer_median": study.up_layer.median,
        "no_jump_steps": study.up_layer.no_jump_steps,
        "final_layer_atvd": study.convergence.mean_curve.last(),
    });
    let report = StudyReport {
        layers: vec![study],
        ..Default::default()
    };
    let out = ctx.out_dir(None);
    let digest = sha256_hex(&std::fs::read(dump).unwrap_or_default());
    finish(&report, &digest, &out, t0)?;
    Ok(json!({ "report": out.join("report.json"), "layers": summary }))
}

fn cmd_sweep(ctx: &Ctx, grid: &[f64], task: Option<&str>) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let (cfg, digest) = ctx.config()?;
    let grid = if grid.is_empty() { cfg.studies.temperature_grid.clone() } else { grid.to_vec() };
    let task = match task {
        Some(id) => cfg.task(id).ok_or_else(|| CliError::Usage(format!("unknown task {id:?}")))?,
        None => cfg
            .sweep_task()
            .ok_or_else(|| CliError::Usage("config has no simulated task to sweep".into()))?,
    };
    let out = ctx.out_dir(Some(&cfg));
    let opts = ctx.options(&cfg, Some(out.join("transcripts")));
    let mut report = StudyReport::default();
    for b in &cfg.backends {
        report
            .sweeps
            .push(temperature_sweep(b, &task.id, &task.spec, &grid, cfg.runs_per_cell, &opts)?);
    }
    finish(&report, &digest, &out, t0)
}

fn cmd_prior(ctx: &Ctx, labels: &[String]) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let (cfg, digest) = ctx.config()?;
    let alphabet = if labels.is_empty() {
        cfg.tasks
            .iter()
            .find_map(|t| t.spec.effective_alphabet().cloned())
            .ok_or_else(|| CliError::Usage("no alphabet given and none in config".into()))?
    } else {
        Alphabet::from_labels(labels)?
    };
    let out = ctx.out_dir(Some(&cfg));
    let opts = ctx.options(&cfg, Some(out.join("transcripts")));
    let mut report = StudyReport::default();
    for b in &cfg.backends {
        let (cell, prior): (_, PriorResult) = prior_study(b, &alphabet, cfg.runs_per_cell, &opts)?;
        report.cells.push(cell);
        report.priors.push(prior);
    }
    finish(&report, &digest, &out, t0)
}

fn cmd_first_token(ctx: &Ctx, corpus: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let t0 = started();
    let (cfg, digest) = ctx.config()?;
    let corpus = corpus
        .map(Path::to_path_buf)
        .or_else(|| cfg.studies.first_token_corpus.clone())
        .ok_or_else(|| CliError::Usage("--corpus is required".into()))?;
    let out = ctx.out_dir(Some(&cfg));
    let opts = ctx.options(&cfg, Some(out.join("transcripts")));
    let mut report = StudyReport::default();
    for b in &cfg.backends {
        report.first_token.push(first_token_study(b, &corpus, &opts)?);
    }
    finish(&report, &digest, &out, t0)
}

fn cmd_validate(ctx: &Ctx, store: Option<&Path>, dump: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let mut checked = serde_json::Map::new();
    if ctx.global.config.is_some() {
        let (cfg, digest) = ctx.config()?;
        let simulated = cfg.tasks.iter().filter(|t| t.spec.kind == PromptKind::Simulated).count();
        checked.insert(
            "config".into(),
            json!({"tasks": cfg.tasks.len(), "simulated": simulated, "backends": cfg.backends.len(), "digest": digest}),
        );
        for t in &cfg.tasks {
            distfid::dist::render_prompt(&t.spec)?;
        }
    }
    if let Some(store) = store {
        let n = load_path(store)?.len();
        checked.insert("store".into(), json!({"transcripts": n}));
    }
    if let Some(dump) = dump {
        let trace = layers::load_trace(dump)?;
        layers::layer_distributions(&trace)?;
        checked.insert(
            "dump".into(),
            json!({"n_layers": trace.n_layers, "steps": trace.steps.len(), "records": trace.record_count()}),
        );
    }
    if checked.is_empty() {
        return Err(CliError::Usage("nothing to validate: pass --config, --store or --dump".into()));
    }
    Ok(json!({ "ok": true, "checked": checked }))
}

fn dispatch(cli: Cli) -> Result<serde_json::Value, CliError> {
    let ctx = Ctx { global: cli.global };
    match &cli.command {
        Command::Run => cmd_run(&ctx),
        Command::Replay { store } => cmd_replay(&ctx, store),
        Command::Quota { store, task } => cmd_quota(&ctx, store, task),
        Command::Layers {
            dump,
            task,
            jump_fraction,
        } => cmd_layers(&ctx, dump, task, *jump_fraction),
        Command::Sweep { grid, task } => cmd_sweep(&ctx, grid, task.as_deref()),
        Command::Prior { alphabet } => cmd_prior(&ctx, alphabet),
        Command::FirstToken { corpus } => cmd_first_token(&ctx, corpus.as_deref()),
        Command::Validate { store, dump } => cmd_validate(&ctx, store.as_deref(), dump.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.global.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}

