//! OpenAI-compatible chat-completions client with `logprobs` enabled.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendConfig, BackendError, GenerationRequest, HttpSettings, Transcript, TranscriptMeta, SCHEMA_VERSION};
use crate::extract::{StepRecord, TopEntry};

/// Base delay of the exponential backoff between retries.
const BACKOFF_BASE: Duration = Duration::from_millis(500);

pub struct HttpBackend {
    config: BackendConfig,
    settings: HttpSettings,
    agent: ureq::Agent,
    backoff_base: Duration,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

fn mentions_logprobs(body: &str) -> bool {
    body.to_ascii_lowercase().contains("logprob")
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default();
    secs.to_string()
}

impl HttpBackend {
    pub fn new(config: BackendConfig, settings: HttpSettings) -> Result<Self, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            settings,
            agent,
            backoff_base: BACKOFF_BASE,
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn url(&self) -> String {
        let base = self.settings.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.settings.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::MissingToken(var.clone())),
        }
    }

    fn attempt(&self, body: &serde_json::Value, token: Option<&str>) -> Result<ChatResponse, BackendError> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| BackendError::Network {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| BackendError::Network {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status >= 400 {
            if status == 400 && mentions_logprobs(&text) {
                return Err(BackendError::ProviderLogprobsUnavailable(text));
            }
            return Err(BackendError::Provider { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }

    fn to_transcript(&self, request: &GenerationRequest, resp: ChatResponse) -> Result<Transcript, BackendError> {
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
        let tokens = choice
            .logprobs
            .and_then(|l| l.content)
            .ok_or_else(|| BackendError::ProviderLogprobsUnavailable("response carries no logprobs".into()))?;
        let steps = tokens
            .into_iter()
            .enumerate()
            .map(|(t, tok)| {
                let top = if tok.top_logprobs.is_empty() {
                    vec![TopEntry::new(tok.token.clone(), tok.logprob)]
                } else {
                    tok.top_logprobs
                        .into_iter()
                        .take(self.config.top_k)
                        .map(|e| TopEntry::new(e.token, e.logprob))
                        .collect()
                };
                StepRecord::new(t, tok.token, top)
            })
            .collect();
        Ok(Transcript {
            schema_version: SCHEMA_VERSION,
            trial_id: request.trial_id.clone(),
            prompt: request.prompt.clone(),
            output_text: choice.message.content.unwrap_or_default(),
            steps,
            meta: TranscriptMeta {
                model: self.config.model.clone(),
                temperature: self.config.temperature,
                top_k: self.config.top_k,
                timestamp: Some(timestamp()),
                seed: None,
                truncated: choice.finish_reason.as_deref() == Some("length"),
                floor_clamps: None,
            },
        })
    }
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Transcript, BackendError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "logprobs": true,
            "top_logprobs": self.config.top_k,
        });
        let token = self.token()?;
        let budget = self.config.retries.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(&body, token.as_deref()) {
                Ok(resp) => return self.to_transcript(request, resp),
                Err(e) if e.is_retryable() && attempt < budget => {
                    tracing::warn!(trial = %request.trial_id, attempt, error = %e, "retrying");
                    std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
                }
                Err(BackendError::Network { message, .. }) => {
                    return Err(BackendError::Network {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
