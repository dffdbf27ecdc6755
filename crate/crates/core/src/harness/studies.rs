use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    cell_file_name, generate_trials, run_cell, run_cell_tagged, CellResult, Classification, ExperimentConfig,
    HarnessError, RunOptions, TrialRecord,
};
use crate::backends::store::write_store;
use crate::backends::{BackendConfig, GenerationRequest, Transcript};
use crate::dist::{render_prompt, uniform_distribution, Alphabet, PromptKind, PromptSpec, TaskDistribution};
use crate::extract::{prefix_distribution, restrict_and_normalize};
use crate::layers::{self, ConvergenceCurve, UpLayerSummary, DEFAULT_JUMP_FRACTION};
use crate::metrics::{atvd, pearson_r, regression_slope, MetricError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub temperature: f64,
    pub e_score_mean: f64,
    pub e_score_std: f64,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model: String,
    pub task: String,
    pub points: Vec<SweepPoint>,
    #[serde(skip)]
    pub cells: Vec<CellResult>,
}

/// Runs the same cell at every temperature of `grid`.
pub fn temperature_sweep(
    backend: &BackendConfig,
    task_id: &str,
    spec: &PromptSpec,
    grid: &[f64],
    runs: usize,
    opts: &RunOptions,
) -> Result<SweepResult, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    let mut result = SweepResult {
        model: backend.id.clone(),
        task: task_id.to_string(),
        points: Vec::with_capacity(grid.len()),
        cells: Vec::with_capacity(grid.len()),
    };
    for &t in grid {
        let cfg = backend.clone().with_temperature(t);
        let cell = run_cell_tagged(&cfg, task_id, spec, runs, opts, Some(&format!("T{t}")))?;
        result.points.push(SweepPoint {
            temperature: t,
            e_score_mean: cell.aggregate.mean.e_score,
            e_score_std: cell.aggregate.std.e_score,
            classification: cell.classification,
        });
        result.cells.push(cell);
    }
    Ok(result)
}

/// Cell run against the uniform distribution with the unconditioned prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorResult {
    pub model: String,
    pub task: String,
    /// Pooled over all samples of the cell.
    pub atvd_uniform_result: f64,
    /// Pooled over all sample steps of the cell.
    pub atvd_uniform_token: f64,
    pub atvd_token_result: f64,
    pub e_score: f64,
    pub pooled_result: Vec<f64>,
    pub pooled_token: Vec<f64>,
}

impl PriorResult {
    pub fn from_cell(cell: &CellResult) -> Result<Self, MetricError> {
        let uniform = vec![1.0 / cell.pooled_result.len() as f64; cell.pooled_result.len()];
        Ok(Self {
            model: cell.model.clone(),
            task: cell.task.clone(),
            atvd_uniform_result: atvd(&uniform, &cell.pooled_result)?,
            atvd_uniform_token: atvd(&uniform, &cell.pooled_token)?,
            atvd_token_result: atvd(&cell.pooled_token, &cell.pooled_result)?,
            e_score: cell.aggregate.mean.e_score,
            pooled_result: cell.pooled_result.clone(),
            pooled_token: cell.pooled_token.clone(),
        })
    }
}

pub fn prior_study(
    backend: &BackendConfig,
    alphabet: &Alphabet,
    runs: usize,
    opts: &RunOptions,
) -> Result<(CellResult, PriorResult), HarnessError> {
    let spec = PromptSpec::prior(alphabet.clone());
    let cell = run_cell(backend, "prior", &spec, runs, opts)?;
    let prior = PriorResult::from_cell(&cell)?;
    Ok((cell, prior))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CorpusRecord {
    pub prompt: String,
    pub options: Alphabet,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default)]
    pub subset: Option<String>,
}

/// Reads a line-delimited prompt corpus.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| HarnessError::CorpusFormat {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(g) = &rec.gold {
            if rec.options.index_of_label(g).is_none() {
                return Err(HarnessError::CorpusFormat {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("gold {g:?} is not an option"),
                });
            }
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(HarnessError::CorpusFormat {
            path: path.to_path_buf(),
            line: 0,
            message: "corpus has no records".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenItem {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    /// Largest restricted probability of the first generated token.
    pub p_max: Option<f64>,
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenSubset {
    pub subset: String,
    pub e_score: f64,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenResult {
    pub model: String,
    pub e_score: f64,
    pub prompts: usize,
    /// Prompts whose first step had no option token among the top entries.
    pub excluded: usize,
    pub subsets: Vec<FirstTokenSubset>,
    pub histogram: Vec<HistogramBin>,
    pub items: Vec<FirstTokenItem>,
}

const HISTOGRAM_BINS: usize = 10;

fn first_token_item(index: usize, rec: &CorpusRecord, transcript: Option<&Transcript>) -> FirstTokenItem {
    let dist = transcript
        .and_then(|t| t.steps.first())
        .and_then(|s| restrict_and_normalize(s, &rec.options).ok());
    let (p_max, predicted) = match &dist {
        Some(d) => {
            let (best, p) = d
                .probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc });
            (Some(p), Some(rec.options.symbols()[best].label.clone()))
        }
        None => (None, None),
    };
    let correct = match (&rec.gold, &predicted) {
        (Some(g), Some(p)) => Some(g == p),
        _ => None,
    };
    FirstTokenItem {
        index,
        subset: rec.subset.clone(),
        p_max,
        predicted,
        correct,
    }
}

fn mean_p_max<'a>(items: impl Iterator<Item = &'a FirstTokenItem>) -> (f64, usize) {
    let vals: Vec<f64> = items.filter_map(|i| i.p_max).collect();
    if vals.is_empty() {
        return (0.0, 0);
    }
    (vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
}

/// First-token extremeness over a corpus of single-choice prompts.
pub fn first_token_study(
    backend: &BackendConfig,
    corpus: &Path,
    opts: &RunOptions,
) -> Result<FirstTokenResult, HarnessError> {
    let records = load_corpus(corpus)?;
    let built = backend.build()?;
    let requests = records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let spec = PromptSpec::first_token(rec.prompt.clone(), rec.options.clone());
            Ok(GenerationRequest {
                trial_id: format!("{}/first-token/{i}", backend.id),
                prompt: render_prompt(&spec)?,
                target: Some(uniform_distribution(rec.options.clone())),
                sample_count: 1,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let jobs = opts.jobs.min(backend.max_in_flight.max(1));
    let outcomes = generate_trials(built.as_ref(), &requests, jobs);
    if let Some(dir) = &opts.transcript_dir {
        let ok: Vec<Transcript> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
        write_store(&ok, &dir.join(cell_file_name(&backend.id, "first-token")))?;
    }

    let items: Vec<FirstTokenItem> = records
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(i, (rec, out))| first_token_item(i, rec, out.as_ref().ok()))
        .collect();
    let (e_score, valid) = mean_p_max(items.iter());
    if valid == 0 {
        return Err(HarnessError::AllTrialsFailed {
            cell: format!("{}/first-token", backend.id),
            attempted: items.len(),
            reasons: "no prompt produced an option token".into(),
        });
    }

    let mut histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|b| HistogramBin {
            lo: b as f64 / HISTOGRAM_BINS as f64,
            hi: (b + 1) as f64 / HISTOGRAM_BINS as f64,
            count: 0,
        })
        .collect();
    for p in items.iter().filter_map(|i| i.p_max) {
        let b = ((p * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[b].count += 1;
    }

    let mut names: Vec<String> = Vec::new();
    for rec in &records {
        if let Some(s) = &rec.subset {
            if !names.contains(s) {
                names.push(s.clone());
            }
        }
    }
    let subsets = names
        .into_iter()
        .map(|name| {
            let (e, n) = mean_p_max(items.iter().filter(|i| i.subset.as_deref() == Some(name.as_str())));
            FirstTokenSubset {
                subset: name,
                e_score: e,
                prompts: n,
            }
        })
        .collect();

    Ok(FirstTokenResult {
        model: backend.id.clone(),
        e_score,
        prompts: items.len(),
        excluded: items.len() - valid,
        subsets,
        histogram,
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Correlation {
    Defined { r: f64, slope: f64 },
    /// One of the two series is constant.
    Degenerate,
}

impl Correlation {
    fn compute(xs: &[f64], ys: &[f64]) -> Result<Self, HarnessError> {
        match (pearson_r(xs, ys), regression_slope(xs, ys)) {
            (Ok(r), Ok(slope)) => Ok(Correlation::Defined { r, slope }),
            (Err(MetricError::DegenerateVariance), _) | (_, Err(MetricError::DegenerateVariance)) => {
                Ok(Correlation::Degenerate)
            }
            (Err(e), _) | (_, Err(e)) => Err(e.into()),
        }
    }

    pub fn r(&self) -> Option<f64> {
        match self {
            Correlation::Defined { r, .. } => Some(*r),
            Correlation::Degenerate => None,
        }
    }

    pub fn slope(&self) -> Option<f64> {
        match self {
            Correlation::Defined { slope, .. } => Some(*slope),
            Correlation::Degenerate => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaResult {
    /// Consecutive sample-step pairs used.
    pub pairs: usize,
    pub per_symbol: Vec<Correlation>,
    pub pooled: Correlation,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub deltas: Vec<f64>,
}

/// Regresses the next-step probability change on the residual between the
/// task and the samples emitted so far.
///
/// For consecutive sample steps `t, t+1` the residual is
/// `P_task(x_i) - P_result^t(x_i)` over the samples before step `t` (zero
/// when there are none) and the response is `P^{t+1}(x_i) - P^t(x_i)`.
pub fn quota_analysis(trials: &[TrialRecord], task: &TaskDistribution) -> Result<QuotaResult, HarnessError> {
    let n = task.len();
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut pairs = 0;
    for trial in trials {
        let symbols: Vec<usize> = trial.steps.iter().map(|s| s.symbol).collect();
        for (k, w) in trial.steps.windows(2).enumerate() {
            let (Some(now), Some(next)) = (&w[0].distribution, &w[1].distribution) else {
                continue;
            };
            if now.probs.len() != n {
                return Err(MetricError::LengthMismatch {
                    left: n,
                    right: now.probs.len(),
                }
                .into());
            }
            let freq = prefix_distribution(&symbols[..k], n);
            for i in 0..n {
                let d = freq.as_ref().map_or(0.0, |f| task.probs()[i] - f[i]);
                xs[i].push(d);
                ys[i].push(next.probs[i] - now.probs[i]);
            }
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(HarnessError::InsufficientSteps);
    }
    let per_symbol = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| Correlation::compute(x, y))
        .collect::<Result<Vec<_>, _>>()?;
    let residuals: Vec<f64> = xs.concat();
    let deltas: Vec<f64> = ys.concat();
    let pooled = Correlation::compute(&residuals, &deltas)?;
    Ok(QuotaResult {
        pairs,
        per_symbol,
        pooled,
        residuals,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaEntry {
    pub model: String,
    pub task: String,
    pub result: QuotaResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLayerCheck {
    pub trial_id: String,
    pub expected_atvd_task_token: f64,
    pub final_layer_atvd: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStudy {
    pub dump: String,
    pub model: String,
    pub prompt_id: String,
    pub task: String,
    pub up_layer: UpLayerSummary,
    pub convergence: ConvergenceCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_layer_check: Option<FinalLayerCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFailure {
    pub study: String,
    pub model: String,
    pub task: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyReport {
    pub cells: Vec<CellResult>,
    pub priors: Vec<PriorResult>,
    pub quota: Vec<QuotaEntry>,
    pub sweeps: Vec<SweepResult>,
    pub first_token: Vec<FirstTokenResult>,
    pub layers: Vec<LayerStudy>,
    pub failures: Vec<StudyFailure>,
}

fn failure(study: &str, model: &str, task: &str, e: impl std::fmt::Display) -> StudyFailure {
    StudyFailure {
        study: study.into(),
        model: model.into(),
        task: task.into(),
        error: e.to_string(),
    }
}

/// Runs every study the config enables. Failures of single studies are
/// recorded in the report rather than aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StudyReport, HarnessError> {
    cfg.validate()?;
    let mut report = StudyReport::default();

    for backend in &cfg.backends {
        for task in &cfg.tasks {
            if task.spec.kind == PromptKind::FirstToken {
                continue;
            }
            match run_cell(backend, &task.id, &task.spec, cfg.runs_per_cell, opts) {
                Ok(cell) => report.cells.push(cell),
                Err(e) => report.failures.push(failure("cell", &backend.id, &task.id, e)),
            }
        }
    }

    for cell in &report.cells {
        let Some(task) = cfg.task(&cell.task) else { continue };
        match task.spec.kind {
            PromptKind::Prior => match PriorResult::from_cell(cell) {
                Ok(p) => report.priors.push(p),
                Err(e) => report.failures.push(failure("prior", &cell.model, &cell.task, e)),
            },
            PromptKind::Simulated if cfg.studies.quota => {
                let target = task.spec.target().expect("validated");
                let usable: Vec<TrialRecord> = cell.usable_trials().cloned().collect();
                match quota_analysis(&usable, &target) {
                    Ok(result) => report.quota.push(QuotaEntry {
                        model: cell.model.clone(),
                        task: cell.task.clone(),
                        result,
                    }),
                    Err(e) => report.failures.push(failure("quota", &cell.model, &cell.task, e)),
                }
            }
            _ => {}
        }
    }

    if !cfg.studies.temperature_grid.is_empty() {
        if let Some(task) = cfg.sweep_task() {
            for backend in &cfg.backends {
                match temperature_sweep(
                    backend,
                    &task.id,
                    &task.spec,
                    &cfg.studies.temperature_grid,
                    cfg.runs_per_cell,
                    opts,
                ) {
                    Ok(s) => report.sweeps.push(s),
                    Err(e) => report.failures.push(failure("sweep", &backend.id, &task.id, e)),
                }
            }
        }
    }

    if let Some(corpus) = &cfg.studies.first_token_corpus {
        for backend in &cfg.backends {
            match first_token_study(backend, corpus, opts) {
                Ok(r) => report.first_token.push(r),
                Err(e) => report.failures.push(failure("first_token", &backend.id, "first-token", e)),
            }
        }
    }

    for dump in &cfg.studies.layer_dumps {
        let task = cfg.task(&dump.task).and_then(|t| t.spec.target()).expect("validated");
        match layer_study(dump.path.as_path(), &task, &dump.task, dump.jump_fraction, &report.cells) {
            Ok(s) => report.layers.push(s),
            Err(e) => report.failures.push(failure("layers", "", &dump.task, e)),
        }
    }

    Ok(report)
}

/// Up-layer and convergence analysis of one dump. When `cells` holds the
/// trial the dump was traced from, the final layer is checked against it.
pub fn layer_study(
    path: &Path,
    task: &TaskDistribution,
    task_id: &str,
    jump_fraction: Option<f64>,
    cells: &[CellResult],
) -> Result<LayerStudy, layers::LayerError> {
    let trace = layers::load_trace(path)?;
    let up = layers::up_layer(&trace, jump_fraction.unwrap_or(DEFAULT_JUMP_FRACTION))?;
    let convergence = layers::layer_convergence(&trace, task)?;
    let final_layer_check = cells
        .iter()
        .flat_map(|c| c.trials.iter())
        .find(|t| t.trial_id == trace.prompt_id)
        .and_then(|t| t.metrics.as_ref().map(|m| (t.trial_id.clone(), m.scalars.atvd_task_token)))
        .map(|(trial_id, expected)| {
            let actual = *convergence.mean_curve.last().expect("at least one layer");
            FinalLayerCheck {
                trial_id,
                expected_atvd_task_token: expected,
                final_layer_atvd: actual,
                within_tolerance: (actual - expected).abs() <= layers::FINAL_LAYER_TOLERANCE,
            }
        });
    Ok(LayerStudy {
        dump: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        model: trace.model.clone(),
        prompt_id: trace.prompt_id.clone(),
        task: task_id.to_string(),
        up_layer: up,
        convergence,
        final_layer_check,
    })
}
