//! Browser bindings: run synthetic cells, temperature sweeps and the quota
//! regression entirely client-side. Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use distfid::backends::{BackendConfig, Family, QuotaEmission, SyntheticSpec};
use distfid::dist::{make_distribution, Alphabet, PromptSpec, TaskDistribution};
use distfid::harness::{quota_analysis, run_cell, temperature_sweep, Correlation, RunOptions};

fn task_from(probs: &[f64]) -> Result<TaskDistribution, String> {
    let alphabet = Alphabet::numeric(1, probs.len() as u32).map_err(|e| e.to_string())?;
    make_distribution(alphabet, probs.to_vec()).map_err(|e| e.to_string())
}

fn family_from(name: &str) -> Result<Family, String> {
    match name {
        "E" | "e" => Ok(Family::E),
        "D" | "d" => Ok(Family::D),
        "quota" => Ok(Family::Quota),
        other => Err(format!("unknown family {other:?}")),
    }
}

fn backend(family: Family, epsilon: f64, temperature: f64, seed: u64) -> BackendConfig {
    let mut spec = SyntheticSpec::new(family).with_seed(seed);
    spec.epsilon = epsilon;
    BackendConfig::synthetic(format!("syn-{family:?}").to_lowercase(), spec).with_temperature(temperature)
}

#[derive(Serialize)]
struct SimulateOut {
    e_score: f64,
    e_score_std: f64,
    atvd_task_token: f64,
    atvd_task_result: f64,
    atvd_token_result: f64,
    atvd_step: f64,
    hamming: f64,
    classification: String,
    task: Vec<f64>,
    pooled_result: Vec<f64>,
    pooled_token: Vec<f64>,
    /// Per-step restricted distributions of the first trial.
    trace: Vec<Vec<f64>>,
    samples: Vec<usize>,
}

pub fn simulate_json(
    family: &str,
    probs: &[f64],
    epsilon: f64,
    temperature: f64,
    samples: usize,
    runs: usize,
    seed: u64,
) -> Result<String, String> {
    let task = task_from(probs)?;
    let cfg = backend(family_from(family)?, epsilon, temperature, seed);
    let spec = PromptSpec::simulated(task.clone()).with_sample_count(samples);
    let cell = run_cell(&cfg, "demo", &spec, runs.max(1), &RunOptions::default()).map_err(|e| e.to_string())?;
    let first = cell.usable_trials().next().ok_or("no usable trial")?;
    let (m, s) = (&cell.aggregate.mean, &cell.aggregate.std);
    let out = SimulateOut {
        e_score: m.e_score,
        e_score_std: s.e_score,
        atvd_task_token: m.atvd_task_token,
        atvd_task_result: m.atvd_task_result,
        atvd_token_result: m.atvd_token_result,
        atvd_step: m.atvd_step,
        hamming: m.hamming,
        classification: cell.classification.to_string(),
        task: task.probs().to_vec(),
        pooled_result: cell.pooled_result.clone(),
        pooled_token: cell.pooled_token.clone(),
        trace: first.step_distributions().into_iter().map(|d| d.probs).collect(),
        samples: first.sequence.symbols.clone(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    family: String,
    temperatures: Vec<f64>,
    e_score: Vec<f64>,
}

pub fn sweep_json(probs: &[f64], grid: &[f64], epsilon: f64, runs: usize, seed: u64) -> Result<String, String> {
    let task = task_from(probs)?;
    let spec = PromptSpec::simulated(task);
    let curves = [("E", Family::E), ("D", Family::D)]
        .into_iter()
        .map(|(name, fam)| {
            let cfg = backend(fam, epsilon, 1.0, seed);
            let s = temperature_sweep(&cfg, "demo", &spec, grid, runs.max(1), &RunOptions::default())
                .map_err(|e| e.to_string())?;
            Ok(Curve {
                family: name.into(),
                temperatures: s.points.iter().map(|p| p.temperature).collect(),
                e_score: s.points.iter().map(|p| p.e_score_mean).collect(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Scatter {
    pairs: usize,
    r: Option<f64>,
    slope: Option<f64>,
    residuals: Vec<f64>,
    deltas: Vec<f64>,
}

pub fn quota_json(
    family: &str,
    probs: &[f64],
    lambda: f64,
    largest_deficit: bool,
    samples: usize,
    runs: usize,
    seed: u64,
) -> Result<String, String> {
    let task = task_from(probs)?;
    let mut spec = SyntheticSpec::new(family_from(family)?).with_seed(seed);
    spec.lambda = lambda;
    if largest_deficit {
        spec.emission = QuotaEmission::LargestDeficit;
    }
    let cfg = BackendConfig::synthetic("syn-quota", spec);
    let prompt = PromptSpec::simulated(task.clone()).with_sample_count(samples);
    let cell = run_cell(&cfg, "demo", &prompt, runs.max(1), &RunOptions::default()).map_err(|e| e.to_string())?;
    let trials: Vec<_> = cell.usable_trials().cloned().collect();
    let q = quota_analysis(&trials, &task).map_err(|e| e.to_string())?;
    let (r, slope) = match q.pooled {
        Correlation::Defined { r, slope } => (Some(r), Some(slope)),
        Correlation::Degenerate => (None, None),
    };
    serde_json::to_string(&Scatter {
        pairs: q.pairs,
        r,
        slope,
        residuals: q.residuals,
        deltas: q.deltas,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate(
    family: &str,
    probs: Vec<f64>,
    epsilon: f64,
    temperature: f64,
    samples: usize,
    runs: usize,
    seed: u64,
) -> Result<String, JsValue> {
    simulate_json(family, &probs, epsilon, temperature, samples, runs, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sweep(probs: Vec<f64>, grid: Vec<f64>, epsilon: f64, runs: usize, seed: u64) -> Result<String, JsValue> {
    sweep_json(&probs, &grid, epsilon, runs, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn quota_scatter(
    family: &str,
    probs: Vec<f64>,
    lambda: f64,
    largest_deficit: bool,
    samples: usize,
    runs: usize,
    seed: u64,
) -> Result<String, JsValue> {
    quota_json(family, &probs, lambda, largest_deficit, samples, runs, seed).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn simulate_e_and_d() {
        let e = parse(&simulate_json("E", &[0.1, 0.7, 0.1, 0.1], 0.0, 1.0, 50, 3, 7).unwrap());
        assert!((e["e_score"].as_f64().unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(e["classification"], "E");
        assert_eq!(e["trace"].as_array().unwrap().len(), 50);
        let d = parse(&simulate_json("D", &[0.1, 0.7, 0.1, 0.1], 0.0, 1.0, 50, 3, 7).unwrap());
        assert_eq!(d["classification"], "D");
    }

    #[test]
    fn sweep_has_two_curves() {
        let v = parse(&sweep_json(&[0.1, 0.7, 0.1, 0.1], &[0.5, 1.0, 2.0], 0.02, 2, 7).unwrap());
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert_eq!(v[0]["e_score"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn quota_scatter_recovers_lambda() {
        let v = parse(&quota_json("quota", &[0.1, 0.2, 0.3, 0.4], 0.5, true, 100, 3, 7).unwrap());
        assert!((v["slope"].as_f64().unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(simulate_json("E", &[0.5, 0.6], 0.0, 1.0, 10, 1, 0).is_err());
        assert!(simulate_json("Z", &[0.5, 0.5], 0.0, 1.0, 10, 1, 0).is_err());
    }
}
