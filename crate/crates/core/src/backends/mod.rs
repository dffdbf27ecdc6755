//! Model backends that produce [`Transcript`]s.
//!
//! Three kinds are supported: a live OpenAI-compatible chat-completions
//! client, replay of a stored transcript file, and synthetic generators
//! whose step distributions are known in closed form.

#[cfg(feature = "http")]
pub mod http;
pub mod replay;
pub mod store;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::TaskDistribution;
use crate::extract::{ExtractError, StepRecord};

pub use store::{load_all, load_transcript, record_transcript, StoreError, SCHEMA_VERSION};
pub use synthetic::{
    synthetic_step_distribution, Family, PlanPolicy, QuotaEmission, SyntheticBackend, SyntheticSpec, SyntheticTrial,
};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("provider refused to return logprobs: {0}")]
    ProviderLogprobsUnavailable(String),
    #[error("provider returned HTTP {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("plan exhausted at step {step} (plan length {len})")]
    PlanExhausted { step: usize, len: usize },
    #[error("synthetic backend has no task distribution for this request")]
    MissingTarget,
    #[error("replay store has no transcript {0:?}")]
    ReplayMissing(String),
    #[error("replayed transcript {0:?} was recorded for a different prompt")]
    ReplayPromptMismatch(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("api token variable {0} is not set")]
    MissingToken(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

impl BackendError {
    /// Transport-level failures that may be retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Network { .. } => true,
            BackendError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Http(HttpSettings),
    Replay { store: PathBuf },
    Synthetic(SyntheticSpec),
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> usize {
    1024
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: String,
    #[serde(default)]
    pub model: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Upper bound on concurrent generate calls.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl BackendConfig {
    pub fn new(id: impl Into<String>, kind: BackendKind) -> Self {
        let id = id.into();
        Self {
            model: id.clone(),
            id,
            kind,
            top_k: DEFAULT_TOP_K,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn synthetic(id: impl Into<String>, spec: SyntheticSpec) -> Self {
        Self::new(id, BackendKind::Synthetic(spec))
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(BackendError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidConfig("max_tokens must be positive".into()));
        }
        if let BackendKind::Synthetic(spec) = &self.kind {
            spec.validate()?;
        }
        Ok(())
    }

    /// Builds the backend described by this config.
    pub fn build(&self) -> Result<Box<dyn Backend>, BackendError> {
        self.validate()?;
        Ok(match &self.kind {
            #[cfg(feature = "http")]
            BackendKind::Http(settings) => Box::new(http::HttpBackend::new(self.clone(), settings.clone())?),
            #[cfg(not(feature = "http"))]
            BackendKind::Http(_) => {
                return Err(BackendError::InvalidConfig("built without the `http` feature".into()));
            }
            BackendKind::Replay { store } => Box::new(replay::ReplayBackend::open(store)?),
            BackendKind::Synthetic(spec) => Box::new(SyntheticBackend::new(self.clone(), spec.clone())),
        })
    }
}

/// One generation to perform.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub trial_id: String,
    pub prompt: String,
    /// Distribution the prompt asks for. Synthetic backends sample from it
    /// unless their spec pins a task; other backends ignore it.
    pub target: Option<TaskDistribution>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptMeta {
    pub model: String,
    pub temperature: f64,
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Generation stopped at `max_tokens`.
    #[serde(default)]
    pub truncated: bool,
    /// Quota-family steps where the probability floor was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_clamps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema_version: u32,
    pub trial_id: String,
    pub prompt: String,
    pub output_text: String,
    pub steps: Vec<StepRecord>,
    pub meta: TranscriptMeta,
}

impl Transcript {
    /// Concatenation of the sampled tokens.
    pub fn token_text(&self) -> String {
        self.steps.iter().map(|s| s.sampled_token.as_str()).collect()
    }
}

pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Transcript, BackendError>;
}

/// Builds a backend from `config` and runs one generation.
pub fn generate(config: &BackendConfig, request: &GenerationRequest) -> Result<Transcript, BackendError> {
    config.build()?.generate(request)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_from_toml() {
        let cfg: BackendConfig = toml::from_str(
            r#"
            id = "gpt"
            model = "gpt-4o"
            kind = "http"
            endpoint = "https://api.openai.com/v1"
            api_key_env = "OPENAI_API_KEY"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.temperature, 1.0);
        assert!(matches!(cfg.kind, BackendKind::Http(_)));

        let syn: BackendConfig = toml::from_str(
            r#"
            id = "d"
            kind = "synthetic"
            family = "D"
            epsilon = 0.02
            "#,
        )
        .unwrap();
        match syn.kind {
            BackendKind::Synthetic(spec) => {
                assert_eq!(spec.family, Family::D);
                assert_eq!(spec.epsilon, 0.02);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BackendConfig::synthetic("e", SyntheticSpec::new(Family::E));
        cfg.temperature = 0.0;
        assert!(matches!(cfg.validate(), Err(BackendError::InvalidConfig(_))));
        cfg.temperature = 1.0;
        cfg.top_k = 0;
        assert!(cfg.validate().is_err());
    }
}
