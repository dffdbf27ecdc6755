//! Alphabets, task distributions and prompt rendering.
//!
//! An [`Alphabet`] is the ordered set of symbols a model is asked to emit.
//! Every symbol carries the label used in the output list and the single
//! vocabulary token that emits it, so that one generation step maps to at
//! most one sample.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(probs) == 1` accepted by [`make_distribution`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Default number of samples requested per trial.
pub const DEFAULT_SAMPLE_COUNT: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("alphabet needs at least 2 symbols, got {0}")]
    AlphabetTooSmall(usize),
    #[error("duplicate label {0:?} in alphabet")]
    DuplicateLabel(String),
    #[error("duplicate token text {0:?} in alphabet")]
    DuplicateToken(String),
    #[error("expected {expected} probabilities, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("probabilities sum to {sum}, deviation exceeds {NORMALIZATION_TOLERANCE}")]
    NotNormalized { sum: f64 },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("simulated prompt requires a task distribution")]
    MissingDistribution,
    #[error("prior prompt requires an alphabet")]
    MissingAlphabet,
    #[error("first-token prompt requires the prompt text as template override")]
    MissingPromptText,
    #[error("sample count must be positive")]
    ZeroSampleCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symbol {
    /// Text as it appears in the generated list, e.g. `"2"`.
    pub label: String,
    /// The single vocabulary token that emits this symbol.
    pub token_text: String,
}

impl Symbol {
    pub fn new(label: impl Into<String>, token_text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            token_text: token_text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Alphabet {
    symbols: Vec<Symbol>,
}

impl Alphabet {
    pub fn new(symbols: Vec<Symbol>) -> Result<Self, DistError> {
        if symbols.len() < 2 {
            return Err(DistError::AlphabetTooSmall(symbols.len()));
        }
        let mut labels = HashSet::new();
        let mut tokens = HashSet::new();
        for s in &symbols {
            if !labels.insert(s.label.as_str()) {
                return Err(DistError::DuplicateLabel(s.label.clone()));
            }
            if !tokens.insert(s.token_text.as_str()) {
                return Err(DistError::DuplicateToken(s.token_text.clone()));
            }
        }
        Ok(Self { symbols })
    }

    /// Alphabet whose token text equals its label.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self, DistError> {
        Self::new(
            labels
                .iter()
                .map(|l| Symbol::new(l.as_ref(), l.as_ref()))
                .collect(),
        )
    }

    /// Decimal numerals `lo..=hi`.
    pub fn numeric(lo: u32, hi: u32) -> Result<Self, DistError> {
        let labels: Vec<String> = (lo..=hi).map(|v| v.to_string()).collect();
        Self::from_labels(&labels)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.symbols.iter().map(|s| s.label.as_str())
    }

    pub fn index_of_label(&self, label: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.label == label)
    }

    pub fn index_of_token(&self, token: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.token_text == token)
    }

    /// `{1, 2, 3, 4}`
    pub fn render_set(&self) -> String {
        let inner: Vec<&str> = self.labels().collect();
        format!("{{{}}}", inner.join(", "))
    }
}

impl<'de> Deserialize<'de> for Alphabet {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            Label(String),
            Full {
                label: String,
                #[serde(alias = "token")]
                token_text: String,
            },
        }
        let entries = Vec::<Entry>::deserialize(de)?;
        let symbols = entries
            .into_iter()
            .map(|e| match e {
                Entry::Label(l) => Symbol::new(l.clone(), l),
                Entry::Full { label, token_text } => Symbol::new(label, token_text),
            })
            .collect();
        Alphabet::new(symbols).map_err(serde::de::Error::custom)
    }
}

/// Target distribution over an alphabet.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskDistribution {
    alphabet: Alphabet,
    probs: Vec<f64>,
}

impl TaskDistribution {
    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// `{1: 0.1, 2: 0.7, 3: 0.1, 4: 0.1}`; probabilities use the shortest
    /// decimal that round-trips.
    pub fn render(&self) -> String {
        let mut out = String::from("{");
        for (i, (sym, p)) in self.alphabet.symbols().iter().zip(&self.probs).enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{}: {}", sym.label, p);
        }
        out.push('}');
        out
    }
}

/// Validates `probs` against `alphabet`.
///
/// Sums within [`NORMALIZATION_TOLERANCE`] of 1 are renormalized, unless the
/// deviation is plain summation round-off, in which case the values are kept
/// verbatim so they render exactly as authored.
pub fn make_distribution(alphabet: Alphabet, probs: Vec<f64>) -> Result<TaskDistribution, DistError> {
    if probs.len() != alphabet.len() {
        return Err(DistError::LengthMismatch {
            expected: alphabet.len(),
            actual: probs.len(),
        });
    }
    for (index, &value) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(DistError::OutOfRange { index, value });
        }
    }
    let sum: f64 = probs.iter().sum();
    let deviation = (sum - 1.0).abs();
    if deviation > NORMALIZATION_TOLERANCE || !sum.is_finite() {
        return Err(DistError::NotNormalized { sum });
    }
    let roundoff = 4.0 * probs.len() as f64 * f64::EPSILON;
    let probs = if deviation > roundoff {
        probs.into_iter().map(|p| p / sum).collect()
    } else {
        probs
    };
    Ok(TaskDistribution { alphabet, probs })
}

pub fn uniform_distribution(alphabet: Alphabet) -> TaskDistribution {
    let n = alphabet.len();
    TaskDistribution {
        alphabet,
        probs: vec![1.0 / n as f64; n],
    }
}

impl<'de> Deserialize<'de> for TaskDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            alphabet: Alphabet,
            probs: Vec<f64>,
        }
        let raw = Raw::deserialize(de)?;
        make_distribution(raw.alphabet, raw.probs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Simulated,
    Prior,
    FirstToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<TaskDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<Alphabet>,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    /// Replaces the built-in template. `{distribution}`, `{alphabet}` and
    /// `{count}` are substituted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_override: Option<String>,
}

fn default_sample_count() -> usize {
    DEFAULT_SAMPLE_COUNT
}

impl PromptSpec {
    pub fn simulated(distribution: TaskDistribution) -> Self {
        Self {
            kind: PromptKind::Simulated,
            distribution: Some(distribution),
            alphabet: None,
            sample_count: DEFAULT_SAMPLE_COUNT,
            template_override: None,
        }
    }

    pub fn prior(alphabet: Alphabet) -> Self {
        Self {
            kind: PromptKind::Prior,
            distribution: None,
            alphabet: Some(alphabet),
            sample_count: DEFAULT_SAMPLE_COUNT,
            template_override: None,
        }
    }

    pub fn first_token(prompt: impl Into<String>, options: Alphabet) -> Self {
        Self {
            kind: PromptKind::FirstToken,
            distribution: None,
            alphabet: Some(options),
            sample_count: 1,
            template_override: Some(prompt.into()),
        }
    }

    pub fn with_sample_count(mut self, n: usize) -> Self {
        self.sample_count = n;
        self
    }

    /// Alphabet the prompt samples over, whichever field carries it.
    pub fn effective_alphabet(&self) -> Option<&Alphabet> {
        self.distribution
            .as_ref()
            .map(TaskDistribution::alphabet)
            .or(self.alphabet.as_ref())
    }

    /// Distribution the outputs are scored against: the stated task for
    /// simulated prompts, uniform otherwise.
    pub fn target(&self) -> Option<TaskDistribution> {
        match self.kind {
            PromptKind::Simulated => self.distribution.clone(),
            PromptKind::Prior | PromptKind::FirstToken => {
                self.effective_alphabet().cloned().map(uniform_distribution)
            }
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        if self.sample_count == 0 {
            return Err(DistError::ZeroSampleCount);
        }
        match self.kind {
            PromptKind::Simulated if self.distribution.is_none() => Err(DistError::MissingDistribution),
            PromptKind::Prior if self.alphabet.is_none() => Err(DistError::MissingAlphabet),
            PromptKind::FirstToken if self.template_override.is_none() => Err(DistError::MissingPromptText),
            PromptKind::FirstToken if self.alphabet.is_none() => Err(DistError::MissingAlphabet),
            _ => Ok(()),
        }
    }
}

const SIMULATED_TEMPLATE: &str = "Given the probability distribution: {distribution}, generate a number of hundreds in {alphabet}, and give the final list (numbers separated by commas) strictly according to the requirements, without adding any text or process description.";

const PRIOR_TEMPLATE: &str = "Must generate {count} numbers in {alphabet} randomly, and give the final list (numbers separated by commas) strictly according to the requirements, without adding any text or process description.";

fn count_phrase(n: usize) -> String {
    if n == 100 {
        "a hundred".to_string()
    } else {
        n.to_string()
    }
}

pub fn render_prompt(spec: &PromptSpec) -> Result<String, DistError> {
    spec.validate()?;
    let alphabet = spec.effective_alphabet().ok_or(DistError::MissingAlphabet)?;
    let template = match (&spec.template_override, spec.kind) {
        (Some(t), _) => t.as_str(),
        (None, PromptKind::Simulated) => SIMULATED_TEMPLATE,
        (None, PromptKind::Prior) => PRIOR_TEMPLATE,
        (None, PromptKind::FirstToken) => return Err(DistError::MissingPromptText),
    };
    let distribution = spec
        .distribution
        .as_ref()
        .map(TaskDistribution::render)
        .unwrap_or_default();
    Ok(template
        .replace("{distribution}", &distribution)
        .replace("{alphabet}", &alphabet.render_set())
        .replace("{count}", &count_phrase(spec.sample_count)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> Alphabet {
        Alphabet::numeric(1, 4).unwrap()
    }

    pub(crate) fn extreme() -> TaskDistribution {
        make_distribution(four(), vec![0.1, 0.7, 0.1, 0.1]).unwrap()
    }

    #[test]
    fn extreme_and_flat_tasks_validate() {
        let d = extreme();
        assert_eq!(d.probs(), &[0.1, 0.7, 0.1, 0.1]);
        let flat = make_distribution(
            Alphabet::numeric(1, 9).unwrap(),
            vec![0.1, 0.1, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1],
        )
        .unwrap();
        assert_eq!(flat.max_prob(), 0.2);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let two = Alphabet::numeric(1, 2).unwrap();
        assert!(matches!(
            make_distribution(two.clone(), vec![0.5, 0.6]),
            Err(DistError::NotNormalized { .. })
        ));
        assert!(matches!(
            make_distribution(two.clone(), vec![1.5, -0.5]),
            Err(DistError::OutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            make_distribution(two, vec![1.0]),
            Err(DistError::LengthMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn tiny_deviation_is_renormalized() {
        let d = make_distribution(Alphabet::numeric(1, 2).unwrap(), vec![0.5, 0.5 + 5e-10]).unwrap();
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alphabet_invariants() {
        assert_eq!(Alphabet::from_labels(&["1"]), Err(DistError::AlphabetTooSmall(1)));
        assert!(matches!(
            Alphabet::from_labels(&["1", "1"]),
            Err(DistError::DuplicateLabel(_))
        ));
        assert!(matches!(
            Alphabet::new(vec![Symbol::new("a", "x"), Symbol::new("b", "x")]),
            Err(DistError::DuplicateToken(_))
        ));
    }

    #[test]
    fn uniform_sizes() {
        assert_eq!(uniform_distribution(four()).probs(), &[0.25; 4]);
        let nine = uniform_distribution(Alphabet::numeric(1, 9).unwrap());
        assert!(nine.probs().iter().all(|&p| p == 1.0 / 9.0));
        assert_eq!(uniform_distribution(Alphabet::numeric(1, 2).unwrap()).probs(), &[0.5, 0.5]);
    }

    #[test]
    fn simulated_prompt_embeds_distribution() {
        let text = render_prompt(&PromptSpec::simulated(extreme())).unwrap();
        assert!(text.contains("Given the probability distribution: {1: 0.1, 2: 0.7, 3: 0.1, 4: 0.1}"));
        assert!(text.contains("in {1, 2, 3, 4}, and give the final list"));
    }

    #[test]
    fn prior_prompt_has_no_probabilities() {
        let text = render_prompt(&PromptSpec::prior(four())).unwrap();
        assert!(text.starts_with("Must generate a hundred numbers in {1, 2, 3, 4} randomly"));
        let fifty = render_prompt(&PromptSpec::prior(four()).with_sample_count(50)).unwrap();
        assert!(fifty.starts_with("Must generate 50 numbers"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = PromptSpec::simulated(extreme());
        assert_eq!(render_prompt(&spec).unwrap(), render_prompt(&spec).unwrap());
    }

    #[test]
    fn missing_parts_are_errors() {
        let mut spec = PromptSpec::simulated(extreme());
        spec.distribution = None;
        assert_eq!(render_prompt(&spec), Err(DistError::MissingDistribution));
        let mut ft = PromptSpec::first_token("Q?", four());
        ft.template_override = None;
        assert_eq!(render_prompt(&ft), Err(DistError::MissingPromptText));
    }

    #[test]
    fn override_substitutes_placeholders() {
        let mut spec = PromptSpec::simulated(extreme());
        spec.template_override = Some("P={distribution} X={alphabet} N={count}".into());
        assert_eq!(
            render_prompt(&spec).unwrap(),
            "P={1: 0.1, 2: 0.7, 3: 0.1, 4: 0.1} X={1, 2, 3, 4} N=a hundred"
        );
    }

    #[test]
    fn alphabet_deserializes_from_labels_or_records() {
        let a: Alphabet = serde_json::from_str(r#"["1", {"label": "2", "token": " 2"}]"#).unwrap();
        assert_eq!(a.symbols()[1].token_text, " 2");
        assert!(serde_json::from_str::<Alphabet>(r#"["1"]"#).is_err());
    }
}
