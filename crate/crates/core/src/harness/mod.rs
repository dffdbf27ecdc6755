//! Experiment orchestration: trials, cells, classification and studies.

mod config;
mod studies;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::store::write_store;
use crate::backends::{Backend, BackendConfig, BackendError, GenerationRequest, StoreError, Transcript};
use crate::dist::{render_prompt, DistError, PromptSpec, TaskDistribution};
use crate::extract::{
    mark_sample_steps, parse_output, prefix_distribution, restrict_and_normalize, ExtractError, SampleSequence,
    StepDistribution,
};
use crate::metrics::{aggregate_trials, hamming_diversity, trial_report, Aggregate, MetricError, MetricReport};

pub use config::{ExperimentConfig, LayerDumpConfig, StudiesConfig, TaskConfig, Thresholds, DEFAULT_RUNS_PER_CELL};
pub use studies::{
    first_token_study, layer_study, load_corpus, prior_study, quota_analysis, run_experiment, temperature_sweep,
    Correlation, CorpusRecord, FinalLayerCheck, FirstTokenItem, FirstTokenResult, FirstTokenSubset, HistogramBin,
    LayerStudy, PriorResult, QuotaEntry, QuotaResult, StudyFailure, StudyReport, SweepPoint, SweepResult,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cell {cell}: all {attempted} trials failed ({reasons})")]
    AllTrialsFailed {
        cell: String,
        attempted: usize,
        reasons: String,
    },
    #[error("{path}:{line}: {message}")]
    CorpusFormat { path: PathBuf, line: usize, message: String },
    #[error("need at least two consecutive sample steps with distributions")]
    InsufficientSteps,
    #[error("grid must not be empty")]
    EmptyGrid,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Knobs shared by every study.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for trial generation; 0 or 1 runs sequentially.
    pub jobs: usize,
    /// Transcripts are written here, one file per cell, before metrics.
    pub transcript_dir: Option<PathBuf>,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    D,
    E,
    #[serde(rename = "indeterminate")]
    Indeterminate,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classification::D => "D",
            Classification::E => "E",
            Classification::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Truncated,
    EmptyOutput,
    NoSampleSteps,
    BackendError(String),
}

/// One sample-emitting step of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStep {
    pub step_index: usize,
    pub symbol: usize,
    /// `None` when no alphabet token was among the top entries.
    pub distribution: Option<StepDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub status: TrialStatus,
    pub output_text: String,
    pub accepted_samples: usize,
    pub rejected_runs: usize,
    pub sample_steps: usize,
    pub all_missing_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip)]
    pub sequence: SampleSequence,
    #[serde(skip)]
    pub steps: Vec<SampleStep>,
}

impl TrialRecord {
    pub fn is_usable(&self) -> bool {
        self.status == TrialStatus::Ok && self.metrics.is_some()
    }

    /// Restricted distributions of the sample steps that have one.
    pub fn step_distributions(&self) -> Vec<StepDistribution> {
        self.steps.iter().filter_map(|s| s.distribution.clone()).collect()
    }

    fn failed(trial_id: String, status: TrialStatus) -> Self {
        Self {
            trial_id,
            status,
            output_text: String::new(),
            accepted_samples: 0,
            rejected_runs: 0,
            sample_steps: 0,
            all_missing_steps: 0,
            metrics: None,
            sequence: SampleSequence::default(),
            steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Exclusions {
    pub all_missing_steps: usize,
    pub truncated_trials: usize,
    pub empty_outputs: usize,
    pub no_sample_steps: usize,
    pub backend_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub task: String,
    pub temperature: f64,
    pub attempted: usize,
    pub trials: Vec<TrialRecord>,
    pub aggregate: Aggregate,
    /// `P_result` over the samples of all usable trials.
    pub pooled_result: Vec<f64>,
    /// Mean `P_token` over the sample steps of all usable trials.
    pub pooled_token: Vec<f64>,
    pub task_probs: Vec<f64>,
    pub classification: Classification,
    pub exclusions: Exclusions,
}

impl CellResult {
    pub fn usable_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| t.is_usable())
    }
}

/// Parses and measures one transcript against `task`.
pub fn analyze_transcript(transcript: &Transcript, task: &TaskDistribution) -> TrialRecord {
    let alphabet = task.alphabet();
    let mut record = TrialRecord::failed(transcript.trial_id.clone(), TrialStatus::Ok);
    record.output_text = transcript.output_text.clone();

    for step in mark_sample_steps(&transcript.steps, alphabet) {
        if !step.is_sample_step {
            continue;
        }
        let symbol = alphabet
            .index_of_token(&step.sampled_token)
            .expect("sample steps match an alphabet token");
        let distribution = match restrict_and_normalize(&step, alphabet) {
            Ok(d) => Some(d),
            Err(ExtractError::AllMissing { .. } | ExtractError::NoTopEntries { .. }) => {
                record.all_missing_steps += 1;
                None
            }
            Err(_) => None,
        };
        record.steps.push(SampleStep {
            step_index: step.step_index,
            symbol,
            distribution,
        });
    }
    record.sample_steps = record.steps.len();

    let sequence = match parse_output(&transcript.output_text, alphabet) {
        Ok(s) => s,
        Err(_) => {
            record.status = TrialStatus::EmptyOutput;
            return record;
        }
    };
    record.accepted_samples = sequence.len();
    record.rejected_runs = sequence.rejected.len();
    let result = prefix_distribution(&sequence.symbols, alphabet.len()).expect("sequence is non-empty");
    record.sequence = sequence;

    let dists = record.step_distributions();
    match trial_report(&dists, &result, task) {
        Ok(m) => record.metrics = Some(m),
        Err(_) => {
            record.status = TrialStatus::NoSampleSteps;
            return record;
        }
    }
    if transcript.meta.truncated {
        record.status = TrialStatus::Truncated;
    }
    record
}

/// Applies `f` to every item with at most `jobs` workers, preserving order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    items.iter().map(f).collect()
}

pub(crate) fn cell_file_name(backend: &str, task: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}__{}.jsonl", clean(backend), clean(task))
}

pub(crate) fn generate_trials(
    backend: &dyn Backend,
    requests: &[GenerationRequest],
    jobs: usize,
) -> Vec<Result<Transcript, BackendError>> {
    parallel_map(requests, jobs, |r| backend.generate(r))
}

/// Runs `runs` independent trials of `spec` on `backend`.
pub fn run_cell(
    backend: &BackendConfig,
    task_id: &str,
    spec: &PromptSpec,
    runs: usize,
    opts: &RunOptions,
) -> Result<CellResult, HarnessError> {
    run_cell_tagged(backend, task_id, spec, runs, opts, None)
}

pub(crate) fn run_cell_tagged(
    backend: &BackendConfig,
    task_id: &str,
    spec: &PromptSpec,
    runs: usize,
    opts: &RunOptions,
    tag: Option<&str>,
) -> Result<CellResult, HarnessError> {
    let prompt = render_prompt(spec)?;
    let task = spec.target().ok_or(DistError::MissingAlphabet)?;
    let built = backend.build()?;
    let prefix = match tag {
        Some(tag) => format!("{}/{}/{}", backend.id, task_id, tag),
        None => format!("{}/{}", backend.id, task_id),
    };
    let requests: Vec<GenerationRequest> = (0..runs)
        .map(|r| GenerationRequest {
            trial_id: format!("{prefix}/{r}"),
            prompt: prompt.clone(),
            target: Some(task.clone()),
            sample_count: spec.sample_count,
        })
        .collect();
    let jobs = opts.jobs.min(backend.max_in_flight.max(1));
    let outcomes = generate_trials(built.as_ref(), &requests, jobs);

    if let Some(dir) = &opts.transcript_dir {
        let ok: Vec<Transcript> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
        let name = match tag {
            Some(tag) => cell_file_name(&backend.id, &format!("{task_id}__{tag}")),
            None => cell_file_name(&backend.id, task_id),
        };
        write_store(&ok, &dir.join(name))?;
    }

    let trials: Vec<TrialRecord> = requests
        .iter()
        .zip(outcomes)
        .map(|(req, outcome)| match outcome {
            Ok(t) => analyze_transcript(&t, &task),
            Err(e) => TrialRecord::failed(req.trial_id.clone(), TrialStatus::BackendError(e.to_string())),
        })
        .collect();
    build_cell(backend, task_id, &task, runs, trials, &opts.thresholds)
}

fn build_cell(
    backend: &BackendConfig,
    task_id: &str,
    task: &TaskDistribution,
    attempted: usize,
    mut trials: Vec<TrialRecord>,
    thresholds: &Thresholds,
) -> Result<CellResult, HarnessError> {
    let mut exclusions = Exclusions::default();
    for t in &trials {
        exclusions.all_missing_steps += t.all_missing_steps;
        match t.status {
            TrialStatus::Ok => {}
            TrialStatus::Truncated => exclusions.truncated_trials += 1,
            TrialStatus::EmptyOutput => exclusions.empty_outputs += 1,
            TrialStatus::NoSampleSteps => exclusions.no_sample_steps += 1,
            TrialStatus::BackendError(_) => exclusions.backend_failures += 1,
        }
    }

    let usable: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].is_usable()).collect();
    if usable.is_empty() {
        let reasons = trials
            .iter()
            .map(|t| match &t.status {
                TrialStatus::BackendError(e) => e.clone(),
                other => format!("{other:?}"),
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(HarnessError::AllTrialsFailed {
            cell: format!("{}/{}", backend.id, task_id),
            attempted,
            reasons,
        });
    }

    for &i in &usable {
        let others: Vec<f64> = usable
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| hamming_diversity(&trials[i].sequence.symbols, &trials[j].sequence.symbols))
            .collect();
        let h = if others.is_empty() {
            0.0
        } else {
            others.iter().sum::<f64>() / others.len() as f64
        };
        if let Some(m) = trials[i].metrics.as_mut() {
            m.scalars.hamming = h;
        }
    }

    let scalars: Vec<_> = usable
        .iter()
        .map(|&i| trials[i].metrics.as_ref().expect("usable").scalars)
        .collect();
    let aggregate = aggregate_trials(&scalars)?;

    let all_samples: Vec<usize> = usable
        .iter()
        .flat_map(|&i| trials[i].sequence.symbols.iter().copied())
        .collect();
    let pooled_result = prefix_distribution(&all_samples, task.len()).unwrap_or_else(|| vec![0.0; task.len()]);
    let all_steps: Vec<StepDistribution> = usable.iter().flat_map(|&i| trials[i].step_distributions()).collect();
    let pooled_token = crate::metrics::mean_distribution(&all_steps)?;

    let mut cell = CellResult {
        model: backend.id.clone(),
        task: task_id.to_string(),
        temperature: backend.temperature,
        attempted,
        trials,
        aggregate,
        pooled_result,
        pooled_token,
        task_probs: task.probs().to_vec(),
        classification: Classification::Indeterminate,
        exclusions,
    };
    cell.classification = classify(&cell, task, thresholds);
    Ok(cell)
}

/// D/E decision from the cell's mean metrics.
///
/// D: `e >= d_escore_min` and `e - max P_task >= margin_min`.
/// E: `atvd_step <= 2 * atvd_task_token` and `e - max P_task < margin_min`.
pub fn classify(cell: &CellResult, task: &TaskDistribution, thresholds: &Thresholds) -> Classification {
    let m = &cell.aggregate.mean;
    let margin = m.e_score - task.max_prob();
    if m.e_score >= thresholds.d_escore_min && margin >= thresholds.margin_min {
        Classification::D
    } else if m.atvd_step <= 2.0 * m.atvd_task_token && margin < thresholds.margin_min {
        Classification::E
    } else {
        Classification::Indeterminate
    }
}

/// Reads every transcript under `path` (a store file or a directory of them).
pub fn collect_transcripts(path: &Path) -> Result<Vec<Transcript>, StoreError> {
    crate::backends::replay::load_path(path)
}
