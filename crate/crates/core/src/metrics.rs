//! Scalar metrics over distributions, sequences and recommendation lists.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::TaskDistribution;
use crate::extract::StepDistribution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no steps to aggregate")]
    EmptySteps,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series has zero variance")]
    DegenerateVariance,
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("empty list")]
    EmptyList,
}

/// Mean over steps of the largest restricted probability.
pub fn e_score(steps: &[StepDistribution]) -> Result<f64, MetricError> {
    if steps.is_empty() {
        return Err(MetricError::EmptySteps);
    }
    Ok(steps.iter().map(StepDistribution::max_prob).sum::<f64>() / steps.len() as f64)
}

/// `(1/n) Σ |p_i - q_i|`.
///
/// Divides by the alphabet size, not by 2 as total variation does.
pub fn atvd(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(MetricError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// ATVD between each step and the task, averaged over steps.
pub fn atvd_step(steps: &[StepDistribution], task: &TaskDistribution) -> Result<f64, MetricError> {
    if steps.is_empty() {
        return Err(MetricError::EmptySteps);
    }
    let mut total = 0.0;
    for s in steps {
        total += atvd(&s.probs, task.probs())?;
    }
    Ok(total / steps.len() as f64)
}

/// Element-wise mean of the step distributions (aggregate `P_token`).
pub fn mean_distribution(steps: &[StepDistribution]) -> Result<Vec<f64>, MetricError> {
    let first = steps.first().ok_or(MetricError::EmptySteps)?;
    let n = first.probs.len();
    let mut acc = vec![0.0; n];
    for s in steps {
        if s.probs.len() != n {
            return Err(MetricError::LengthMismatch {
                left: n,
                right: s.probs.len(),
            });
        }
        for (a, p) in acc.iter_mut().zip(&s.probs) {
            *a += p;
        }
    }
    let t = steps.len() as f64;
    Ok(acc.into_iter().map(|a| a / t).collect())
}

/// Fraction of differing positions after padding the shorter sequence with a
/// sentinel that never equals a real element.
pub fn hamming_diversity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let len = a.len().max(b.len());
    if len == 0 {
        return 0.0;
    }
    let differing = (0..len).filter(|&i| a.get(i) != b.get(i)).count();
    differing as f64 / len as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn centered_moments(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64), MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFewPoints(xs.len()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy, sxx, syy))
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    let (sxy, sxx, syy) = centered_moments(xs, ys)?;
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Least-squares slope of `ys` on `xs`.
pub fn regression_slope(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    let (sxy, sxx, _) = centered_moments(xs, ys)?;
    if sxx == 0.0 {
        return Err(MetricError::DegenerateVariance);
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPass {
    pub value: f64,
    /// Set when pass@5 < pass@1, which cannot happen for consistent inputs.
    pub anomalous: bool,
}

/// `e^{pass@5} - e^{pass@1}`.
pub fn delta_pass(pass1: f64, pass5: f64) -> Result<DeltaPass, MetricError> {
    for v in [pass1, pass5] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricError::OutOfRange(v));
        }
    }
    Ok(DeltaPass {
        value: pass5.exp() - pass1.exp(),
        anomalous: pass5 < pass1,
    })
}

fn fraction_in<T: Eq + Hash>(items: &[T], set: &HashSet<T>) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let hits = items.iter().filter(|i| set.contains(i)).count();
    Ok(hits as f64 / items.len() as f64)
}

pub fn precision_at_k<T: Eq + Hash>(recommended: &[T], relevant: &HashSet<T>) -> Result<f64, MetricError> {
    fraction_in(recommended, relevant)
}

/// Fraction of recommended items present in the candidate list.
pub fn can_hit<T: Eq + Hash>(recommended: &[T], candidates: &HashSet<T>) -> Result<f64, MetricError> {
    fraction_in(recommended, candidates)
}

/// Scalar metrics of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub e_score: f64,
    pub atvd_task_token: f64,
    pub atvd_task_result: f64,
    pub atvd_token_result: f64,
    pub atvd_step: f64,
    pub hamming: f64,
}

impl ScalarMetrics {
    pub const NAMES: [&'static str; 6] = [
        "e_score",
        "atvd_task_token",
        "atvd_task_result",
        "atvd_token_result",
        "atvd_step",
        "hamming",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.e_score,
            self.atvd_task_token,
            self.atvd_task_result,
            self.atvd_token_result,
            self.atvd_step,
            self.hamming,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            e_score: v[0],
            atvd_task_token: v[1],
            atvd_task_result: v[2],
            atvd_token_result: v[3],
            atvd_step: v[4],
            hamming: v[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub scalars: ScalarMetrics,
    /// `p^t_max` for every sample step.
    pub per_step_max: Vec<f64>,
    /// Aggregate `P_token`.
    pub mean_token_distribution: Vec<f64>,
    /// `P_result`.
    pub result_distribution: Vec<f64>,
}

/// Computes the per-trial report. `hamming` is left at 0; it depends on the
/// other trials of a cell and is filled in by the harness.
pub fn trial_report(
    steps: &[StepDistribution],
    result: &[f64],
    task: &TaskDistribution,
) -> Result<MetricReport, MetricError> {
    let token = mean_distribution(steps)?;
    let scalars = ScalarMetrics {
        e_score: e_score(steps)?,
        atvd_task_token: atvd(task.probs(), &token)?,
        atvd_task_result: atvd(task.probs(), result)?,
        atvd_token_result: atvd(&token, result)?,
        atvd_step: atvd_step(steps, task)?,
        hamming: 0.0,
    };
    Ok(MetricReport {
        scalars,
        per_step_max: steps.iter().map(StepDistribution::max_prob).collect(),
        mean_token_distribution: token,
        result_distribution: result.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: ScalarMetrics,
    /// Sample standard deviation; 0 for a single trial.
    pub std: ScalarMetrics,
    pub trials: usize,
}

pub fn aggregate_trials(trials: &[ScalarMetrics]) -> Result<Aggregate, MetricError> {
    if trials.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let n = trials.len() as f64;
    let mut means = [0.0; 6];
    for t in trials {
        for (m, v) in means.iter_mut().zip(t.values()) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = [0.0; 6];
    if trials.len() > 1 {
        for t in trials {
            for ((s, v), m) in stds.iter_mut().zip(t.values()).zip(means) {
                *s += (v - m).powi(2);
            }
        }
        for s in &mut stds {
            *s = (*s / (n - 1.0)).sqrt();
        }
    }
    Ok(Aggregate {
        mean: ScalarMetrics::from_values(means),
        std: ScalarMetrics::from_values(stds),
        trials: trials.len(),
    })
}
