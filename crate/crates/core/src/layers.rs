//! Layer-wise probing of restricted logits dumped by an external exporter.
//!
//! A dump is line-delimited JSON. The first record is a header
//! `{schema_version, model, prompt_id, n_layers, alphabet, steps}`, every
//! other record is `{schema_version, model, prompt_id, layer, step, logits}`
//! with `logits` in alphabet order. Layer 0 is the embedding output after the
//! first block's input norm; layer `n_layers - 1` is the model head.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::TaskDistribution;
use crate::extract::StepDistribution;
use crate::metrics::atvd;

pub const LAYER_DUMP_VERSION: u32 = 1;
pub const DEFAULT_JUMP_FRACTION: f64 = 0.5;
/// Smallest rise in max-probability between layer 0 and the last layer that
/// counts as a jump.
pub const MIN_RISE: f64 = 0.1;
pub const FINAL_LAYER_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("grid incomplete: layer {layer}, step {step} missing")]
    IncompleteGrid { layer: usize, step: usize },
    #[error("non-finite logit at layer {layer}, step {step}")]
    NonFiniteLogit { layer: usize, step: usize },
    #[error("alphabet size {expected} but got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("trace alphabet {trace:?} differs from task alphabet {task:?}")]
    AlphabetMismatch { trace: Vec<String>, task: Vec<String> },
    #[error("need at least 2 layers, got {0}")]
    TooFewLayers(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub schema_version: u32,
    pub model: String,
    pub prompt_id: String,
    pub n_layers: usize,
    pub alphabet: Vec<String>,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub schema_version: u32,
    pub model: String,
    pub prompt_id: String,
    pub layer: usize,
    pub step: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbeTrace {
    pub model: String,
    pub prompt_id: String,
    pub n_layers: usize,
    pub alphabet: Vec<String>,
    /// Sample step indices in dump order.
    pub steps: Vec<usize>,
    /// `logits[layer][k]` belongs to step `steps[k]`.
    pub logits: Vec<Vec<Vec<f64>>>,
}

impl LayerProbeTrace {
    pub fn new(
        model: impl Into<String>,
        prompt_id: impl Into<String>,
        alphabet: Vec<String>,
        steps: Vec<usize>,
        logits: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, LayerError> {
        for (l, layer) in logits.iter().enumerate() {
            if layer.len() != steps.len() {
                let k = layer.len().min(steps.len());
                return Err(LayerError::IncompleteGrid {
                    layer: l,
                    step: steps.get(k).copied().unwrap_or(k),
                });
            }
            for v in layer {
                if v.len() != alphabet.len() {
                    return Err(LayerError::LengthMismatch {
                        expected: alphabet.len(),
                        found: v.len(),
                    });
                }
            }
        }
        Ok(Self {
            model: model.into(),
            prompt_id: prompt_id.into(),
            n_layers: logits.len(),
            alphabet,
            steps,
            logits,
        })
    }

    pub fn header(&self) -> DumpHeader {
        DumpHeader {
            schema_version: LAYER_DUMP_VERSION,
            model: self.model.clone(),
            prompt_id: self.prompt_id.clone(),
            n_layers: self.n_layers,
            alphabet: self.alphabet.clone(),
            steps: self.steps.clone(),
        }
    }

    /// Serializes in the dump format, layer-major.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.header())?;
        out.write_all(b"\n")?;
        for (l, layer) in self.logits.iter().enumerate() {
            for (k, v) in layer.iter().enumerate() {
                let rec = DumpRecord {
                    schema_version: LAYER_DUMP_VERSION,
                    model: self.model.clone(),
                    prompt_id: self.prompt_id.clone(),
                    layer: l,
                    step: self.steps[k],
                    logits: v.clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.n_layers * self.steps.len()
    }
}

fn format_err(line: usize, message: impl Into<String>) -> LayerError {
    LayerError::Format {
        line,
        message: message.into(),
    }
}

/// Parses a dump from text. Line numbers in errors are 1-based.
pub fn parse_trace(text: &str) -> Result<LayerProbeTrace, LayerError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, first) = lines.next().ok_or_else(|| format_err(1, "empty dump"))?;
    let header: DumpHeader = serde_json::from_str(first).map_err(|e| format_err(hl + 1, format!("header: {e}")))?;
    if header.schema_version != LAYER_DUMP_VERSION {
        return Err(format_err(
            hl + 1,
            format!("schema_version {} unsupported", header.schema_version),
        ));
    }
    if header.alphabet.is_empty() {
        return Err(format_err(hl + 1, "empty alphabet"));
    }
    let step_pos = |s: usize| header.steps.iter().position(|&x| x == s);
    let n = header.alphabet.len();
    let mut grid: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; header.steps.len()]; header.n_layers];
    for (i, line) in lines {
        let rec: DumpRecord = serde_json::from_str(line).map_err(|e| format_err(i + 1, e.to_string()))?;
        if rec.schema_version != LAYER_DUMP_VERSION {
            return Err(format_err(i + 1, format!("schema_version {} unsupported", rec.schema_version)));
        }
        if rec.model != header.model || rec.prompt_id != header.prompt_id {
            return Err(format_err(i + 1, "model or prompt_id differs from header"));
        }
        if rec.layer >= header.n_layers {
            return Err(format_err(i + 1, format!("layer {} out of range", rec.layer)));
        }
        let k = step_pos(rec.step).ok_or_else(|| format_err(i + 1, format!("step {} not in header", rec.step)))?;
        if rec.logits.len() != n {
            return Err(format_err(
                i + 1,
                format!("expected {n} logits, found {}", rec.logits.len()),
            ));
        }
        let slot = &mut grid[rec.layer][k];
        if slot.is_some() {
            return Err(format_err(
                i + 1,
                format!("duplicate record for layer {} step {}", rec.layer, rec.step),
            ));
        }
        *slot = Some(rec.logits);
    }
    let mut logits = Vec::with_capacity(header.n_layers);
    for (l, row) in grid.into_iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (k, v) in row.into_iter().enumerate() {
            out.push(v.ok_or(LayerError::IncompleteGrid {
                layer: l,
                step: header.steps[k],
            })?);
        }
        logits.push(out);
    }
    LayerProbeTrace::new(header.model, header.prompt_id, header.alphabet, header.steps, logits)
}

pub fn load_trace(path: &Path) -> Result<LayerProbeTrace, LayerError> {
    let text = std::fs::read_to_string(path).map_err(|e| LayerError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_trace(&text)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `P^l_token` for every layer and step: `out[layer][k]`.
pub fn layer_distributions(trace: &LayerProbeTrace) -> Result<Vec<Vec<StepDistribution>>, LayerError> {
    trace
        .logits
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            layer
                .iter()
                .zip(&trace.steps)
                .map(|(v, &step)| {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(LayerError::NonFiniteLogit { layer: l, step });
                    }
                    Ok(StepDistribution::new(step, softmax(v)))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpLayer {
    At(usize),
    NoJump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpLayerSummary {
    pub jump_fraction: f64,
    pub per_step: Vec<UpLayer>,
    /// Median over steps that have a jump.
    pub median: Option<f64>,
    pub no_jump_steps: usize,
}

/// Up-layer of one max-probability profile across layers.
///
/// The smallest `l >= 1` whose rise over `l - 1` is at least `jump_fraction`
/// of the rise from layer 0 to the last layer. Profiles rising less than
/// [`MIN_RISE`] overall, or without such a layer, have no jump.
pub fn up_layer_of(maxima: &[f64], jump_fraction: f64) -> UpLayer {
    let (Some(first), Some(last)) = (maxima.first(), maxima.last()) else {
        return UpLayer::NoJump;
    };
    let rise = last - first;
    if rise < MIN_RISE {
        return UpLayer::NoJump;
    }
    maxima
        .windows(2)
        .position(|w| w[1] - w[0] >= jump_fraction * rise)
        .map_or(UpLayer::NoJump, |i| UpLayer::At(i + 1))
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[m] } else { (xs[m - 1] + xs[m]) / 2.0 })
}

pub fn up_layer(trace: &LayerProbeTrace, jump_fraction: f64) -> Result<UpLayerSummary, LayerError> {
    if trace.n_layers < 2 {
        return Err(LayerError::TooFewLayers(trace.n_layers));
    }
    let dists = layer_distributions(trace)?;
    let per_step: Vec<UpLayer> = (0..trace.steps.len())
        .map(|k| {
            let maxima: Vec<f64> = dists.iter().map(|layer| layer[k].max_prob()).collect();
            up_layer_of(&maxima, jump_fraction)
        })
        .collect();
    let jumps: Vec<f64> = per_step
        .iter()
        .filter_map(|u| match u {
            UpLayer::At(l) => Some(*l as f64),
            UpLayer::NoJump => None,
        })
        .collect();
    Ok(UpLayerSummary {
        jump_fraction,
        no_jump_steps: per_step.len() - jumps.len(),
        median: median(jumps),
        per_step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    /// `atvd(mean_t P^l_token, P_task)` per layer.
    pub mean_curve: Vec<f64>,
    /// `per_step[layer][k]` is `atvd(P^l_token at steps[k], P_task)`.
    pub per_step: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
}

pub fn layer_convergence(trace: &LayerProbeTrace, task: &TaskDistribution) -> Result<ConvergenceCurve, LayerError> {
    if trace.alphabet.len() != task.len() {
        return Err(LayerError::LengthMismatch {
            expected: task.len(),
            found: trace.alphabet.len(),
        });
    }
    let labels: Vec<String> = task.alphabet().labels().map(str::to_string).collect();
    if labels != trace.alphabet {
        return Err(LayerError::AlphabetMismatch {
            trace: trace.alphabet.clone(),
            task: labels,
        });
    }
    let dists = layer_distributions(trace)?;
    let n = task.len();
    let mut mean_curve = Vec::with_capacity(dists.len());
    let mut per_step = Vec::with_capacity(dists.len());
    for layer in &dists {
        let mut mean = vec![0.0; n];
        let mut row = Vec::with_capacity(layer.len());
        for d in layer {
            for (m, p) in mean.iter_mut().zip(&d.probs) {
                *m += p;
            }
            row.push(atvd(&d.probs, task.probs()).expect("lengths checked"));
        }
        if !layer.is_empty() {
            mean.iter_mut().for_each(|m| *m /= layer.len() as f64);
        }
        mean_curve.push(atvd(&mean, task.probs()).expect("lengths checked"));
        per_step.push(row);
    }
    Ok(ConvergenceCurve {
        mean_curve,
        per_step,
        steps: trace.steps.clone(),
    })
}

/// Trace whose logits are uniform below `jump` and one-hot (logit gap `gap`)
/// on `hot` from `jump` on.
pub fn step_function_trace(n_layers: usize, n_steps: usize, alphabet: Vec<String>, jump: usize, hot: usize, gap: f64) -> LayerProbeTrace {
    let n = alphabet.len();
    let logits = (0..n_layers)
        .map(|l| {
            (0..n_steps)
                .map(|_| {
                    let mut v = vec![0.0; n];
                    if l >= jump {
                        v[hot] = gap;
                    }
                    v
                })
                .collect()
        })
        .collect();
    LayerProbeTrace::new("synthetic", "step-function", alphabet, (0..n_steps).collect(), logits)
        .expect("well-formed by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{make_distribution, Alphabet};
    use approx::assert_abs_diff_eq;

    fn labels() -> Vec<String> {
        ["1", "2", "3", "4"].map(String::from).to_vec()
    }

    fn dump(trace: &LayerProbeTrace) -> String {
        let mut buf = Vec::new();
        trace.write_to(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        assert_abs_diff_eq!(softmax(&[10.0, 0.0, 0.0, 0.0])[0], 0.999_863_819_6, epsilon = 1e-9);
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[6.0, 7.0, 8.0]);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn round_trip_and_record_count() {
        let t = step_function_trace(32, 100, labels(), 20, 1, 30.0);
        let text = dump(&t);
        assert_eq!(text.lines().count(), 3201);
        let back = parse_trace(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.record_count(), 3200);
    }

    #[test]
    fn missing_layer_is_incomplete() {
        let t = step_function_trace(10, 3, labels(), 5, 0, 30.0);
        let text: String = dump(&t)
            .lines()
            .filter(|l| !l.contains("\"layer\":7,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(parse_trace(&text), Err(LayerError::IncompleteGrid { layer: 7, .. })));
    }

    #[test]
    fn malformed_line_reports_line() {
        let t = step_function_trace(2, 2, labels(), 1, 0, 30.0);
        let mut lines: Vec<String> = dump(&t).lines().map(String::from).collect();
        lines[3] = "{not json".into();
        match parse_trace(&lines.join("\n")) {
            Err(LayerError::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_function_recovers_jump() {
        let t = step_function_trace(32, 5, labels(), 20, 1, 30.0);
        let up = up_layer(&t, DEFAULT_JUMP_FRACTION).unwrap();
        assert!(up.per_step.iter().all(|u| *u == UpLayer::At(20)));
        assert_eq!(up.median, Some(20.0));
    }

    #[test]
    fn flat_and_ramp_traces() {
        let flat = step_function_trace(8, 2, labels(), 8, 0, 30.0);
        let up = up_layer(&flat, 0.5).unwrap();
        assert!(up.per_step.iter().all(|u| *u == UpLayer::NoJump));
        assert_eq!(up.median, None);

        // Max-prob rising by 0.05 per layer: each step is 1/10 of the rise.
        let ramp: Vec<f64> = (0..11).map(|l| 0.25 + 0.05 * l as f64).collect();
        assert_eq!(up_layer_of(&ramp, 0.5), UpLayer::NoJump);
        assert_eq!(up_layer_of(&ramp, 0.1 - 1e-9), UpLayer::At(1));
    }

    #[test]
    fn convergence_tails() {
        let task = make_distribution(Alphabet::numeric(1, 4).unwrap(), vec![0.1, 0.7, 0.1, 0.1]).unwrap();
        let one_hot = step_function_trace(6, 3, labels(), 3, 1, 60.0);
        let c = layer_convergence(&one_hot, &task).unwrap();
        assert_eq!(c.mean_curve.len(), 6);
        assert_abs_diff_eq!(c.mean_curve[5], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mean_curve[0], 0.225, epsilon = 1e-12);

        let matched: Vec<f64> = task.probs().iter().map(|p| p.ln()).collect();
        let t = LayerProbeTrace::new("m", "p", labels(), vec![0, 2], vec![vec![matched.clone(); 2]; 3]).unwrap();
        let c = layer_convergence(&t, &task).unwrap();
        assert!(c.mean_curve.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn non_finite_and_mismatch() {
        let t = LayerProbeTrace::new("m", "p", labels(), vec![0], vec![vec![vec![f64::NAN, 0.0, 0.0, 0.0]]; 2]).unwrap();
        assert!(matches!(layer_distributions(&t), Err(LayerError::NonFiniteLogit { layer: 0, step: 0 })));
        let task = make_distribution(Alphabet::numeric(1, 3).unwrap(), vec![0.2, 0.3, 0.5]).unwrap();
        let t = step_function_trace(2, 1, labels(), 1, 0, 1.0);
        assert!(matches!(layer_convergence(&t, &task), Err(LayerError::LengthMismatch { .. })));
    }
}
