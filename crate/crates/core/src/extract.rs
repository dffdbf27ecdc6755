//! Turns raw per-step logprobs and generated text into distributions over
//! an alphabet.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::Alphabet;

/// Slack allowed above zero for provider-reported logprobs.
pub const LOGPROB_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("step {step}: no alphabet token among the top entries")]
    AllMissing { step: usize },
    #[error("step {step}: top entries are empty")]
    NoTopEntries { step: usize },
    #[error("step {step}: logprob {logprob} for {token:?} is positive or not finite")]
    InvalidLogprob { step: usize, token: String, logprob: f64 },
    #[error("step {step}: token {token:?} listed twice in top entries")]
    DuplicateTopToken { step: usize, token: String },
    #[error("output contains no alphabet samples")]
    EmptyOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    #[serde(rename = "tok")]
    pub token: String,
    /// Natural log probability.
    pub logprob: f64,
}

impl TopEntry {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

/// One generation step as reported by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(rename = "t")]
    pub step_index: usize,
    #[serde(rename = "token")]
    pub sampled_token: String,
    #[serde(rename = "top")]
    pub top_entries: Vec<TopEntry>,
    #[serde(rename = "sample", default, skip_serializing)]
    pub is_sample_step: bool,
}

impl StepRecord {
    pub fn new(step_index: usize, sampled_token: impl Into<String>, top_entries: Vec<TopEntry>) -> Self {
        Self {
            step_index,
            sampled_token: sampled_token.into(),
            top_entries,
            is_sample_step: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        let step = self.step_index;
        if self.top_entries.is_empty() {
            return Err(ExtractError::NoTopEntries { step });
        }
        let mut seen = HashSet::new();
        for e in &self.top_entries {
            if !(e.logprob <= LOGPROB_SLACK) || e.logprob.is_nan() {
                return Err(ExtractError::InvalidLogprob {
                    step,
                    token: e.token.clone(),
                    logprob: e.logprob,
                });
            }
            if !seen.insert(e.token.as_str()) {
                return Err(ExtractError::DuplicateTopToken {
                    step,
                    token: e.token.clone(),
                });
            }
        }
        Ok(())
    }
}

/// `P_token^t`: a step's next-token distribution restricted to the alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub step_index: usize,
    pub probs: Vec<f64>,
    /// Probability mass of all top entries before restriction.
    pub covered_mass: f64,
}

impl StepDistribution {
    pub fn new(step_index: usize, probs: Vec<f64>) -> Self {
        let covered_mass = probs.iter().sum();
        Self {
            step_index,
            probs,
            covered_mass,
        }
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

/// Restricts a step's top entries to the alphabet and renormalizes.
///
/// Alphabet tokens missing from the top entries get probability exactly 0.
pub fn restrict_and_normalize(step: &StepRecord, alphabet: &Alphabet) -> Result<StepDistribution, ExtractError> {
    if step.top_entries.is_empty() {
        return Err(ExtractError::NoTopEntries { step: step.step_index });
    }
    let covered_mass = step.top_entries.iter().map(|e| e.logprob.exp()).sum();
    let mut probs = vec![0.0; alphabet.len()];
    let mut present = false;
    for e in &step.top_entries {
        if let Some(i) = alphabet.index_of_token(&e.token) {
            probs[i] = e.logprob.exp();
            present = true;
        }
    }
    let total: f64 = probs.iter().sum();
    if !present || total <= 0.0 {
        return Err(ExtractError::AllMissing { step: step.step_index });
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(StepDistribution {
        step_index: step.step_index,
        probs,
        covered_mass,
    })
}

/// Flags the steps whose sampled token is exactly an alphabet token.
pub fn mark_sample_steps(steps: &[StepRecord], alphabet: &Alphabet) -> Vec<StepRecord> {
    steps
        .iter()
        .map(|s| StepRecord {
            is_sample_step: alphabet.index_of_token(&s.sampled_token).is_some(),
            ..s.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRun {
    /// Ordinal among all extracted runs.
    pub position: usize,
    pub text: String,
}

/// Samples parsed from a generated list, as alphabet indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleSequence {
    pub symbols: Vec<usize>,
    pub rejected: Vec<RejectedRun>,
}

impl SampleSequence {
    pub fn from_symbols(symbols: Vec<usize>) -> Self {
        Self {
            symbols,
            rejected: Vec::new(),
        }
    }

    /// Number of accepted samples, `N`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn labels<'a>(&'a self, alphabet: &'a Alphabet) -> impl Iterator<Item = &'a str> + 'a {
        self.symbols
            .iter()
            .map(move |&i| alphabet.symbols()[i].label.as_str())
    }
}

/// Which characters may form part of a label-shaped run.
enum RunShape {
    Digits,
    Word(HashSet<char>),
}

impl RunShape {
    fn for_alphabet(alphabet: &Alphabet) -> Self {
        let numeric = alphabet
            .labels()
            .all(|l| !l.is_empty() && l.chars().all(|c| c.is_ascii_digit()));
        if numeric {
            RunShape::Digits
        } else {
            RunShape::Word(alphabet.labels().flat_map(str::chars).collect())
        }
    }

    fn accepts(&self, c: char) -> bool {
        match self {
            RunShape::Digits => c.is_ascii_digit(),
            RunShape::Word(extra) => c.is_alphanumeric() || (extra.contains(&c) && c != ',' && !c.is_whitespace()),
        }
    }
}

/// Extracts maximal label-shaped runs from `text`; runs that match a label
/// are accepted, the rest are recorded as rejected.
pub fn parse_output(text: &str, alphabet: &Alphabet) -> Result<SampleSequence, ExtractError> {
    let shape = RunShape::for_alphabet(alphabet);
    let mut seq = SampleSequence::default();
    let mut position = 0;
    let mut run = String::new();
    let mut flush = |run: &mut String, seq: &mut SampleSequence| {
        if run.is_empty() {
            return;
        }
        match alphabet.index_of_label(run) {
            Some(i) => seq.symbols.push(i),
            None => seq.rejected.push(RejectedRun {
                position,
                text: run.clone(),
            }),
        }
        position += 1;
        run.clear();
    };
    for c in text.chars() {
        if shape.accepts(c) {
            run.push(c);
        } else {
            flush(&mut run, &mut seq);
        }
    }
    flush(&mut run, &mut seq);
    if seq.symbols.is_empty() {
        return Err(ExtractError::EmptyOutput);
    }
    Ok(seq)
}

/// `P_result`: frequencies of the parsed samples.
pub fn empirical_distribution(seq: &SampleSequence, alphabet: &Alphabet) -> Result<Vec<f64>, ExtractError> {
    prefix_distribution(&seq.symbols, alphabet.len()).ok_or(ExtractError::EmptyOutput)
}

/// Frequencies over `prefix`, or `None` when it is empty.
pub fn prefix_distribution(prefix: &[usize], n: usize) -> Option<Vec<f64>> {
    if prefix.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; n];
    for &s in prefix {
        counts[s] += 1;
    }
    let total = prefix.len() as f64;
    Some(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Running `P_result^t` for `t = 0..=len`; entry `t` covers the first `t`
/// samples and is `None` at `t = 0`.
pub fn running_distributions(symbols: &[usize], n: usize) -> Vec<Option<Vec<f64>>> {
    let mut out = Vec::with_capacity(symbols.len() + 1);
    out.push(None);
    let mut counts = vec![0usize; n];
    for (k, &s) in symbols.iter().enumerate() {
        counts[s] += 1;
        let total = (k + 1) as f64;
        out.push(Some(counts.iter().map(|&c| c as f64 / total).collect()));
    }
    out
}
