//! Synthetic generators with known step distributions.
//!
//! * `E` emits every sample from the task distribution itself.
//! * `D` fixes a plan of symbols up front and puts almost all mass on the
//!   planned symbol at every step.
//! * `quota` starts from the task and moves each step's distribution by
//!   `lambda` times the residual between the task and the samples emitted
//!   so far.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendConfig, BackendError, GenerationRequest, Transcript, TranscriptMeta, SCHEMA_VERSION};
use crate::dist::TaskDistribution;
use crate::extract::{StepDistribution, StepRecord, TopEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "E", alias = "e")]
    E,
    #[serde(rename = "D", alias = "d")]
    D,
    #[serde(rename = "quota")]
    Quota,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanPolicy {
    /// One multinomial draw of the whole plan per trial.
    #[default]
    IidDraw,
    /// Exact quotas by largest remainder, emitted in alphabet order.
    SortedBlocks,
}

/// How the quota family picks the emitted symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaEmission {
    /// Draw from the step distribution.
    #[default]
    Sampled,
    /// Emit the symbol furthest below its quota `p_i * (t + 1)`.
    LargestDeficit,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_floor() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Pins the task; otherwise the request's target is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskDistribution>,
    /// Off-plan leak mass of the D family.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub plan_policy: PlanPolicy,
    #[serde(default)]
    pub emission: QuotaEmission,
    #[serde(default)]
    pub seed: u64,
    /// Emit a space step after each comma.
    #[serde(default = "default_true")]
    pub separators: bool,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

impl SyntheticSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            task: None,
            epsilon: 0.0,
            lambda: default_lambda(),
            plan_policy: PlanPolicy::default(),
            emission: QuotaEmission::default(),
            seed: 0,
            separators: true,
            floor: default_floor(),
        }
    }

    pub fn with_task(mut self, task: TaskDistribution) -> Self {
        self.task = Some(task);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(BackendError::InvalidConfig(format!(
                "epsilon must be in [0, 0.5), got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(BackendError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(BackendError::InvalidConfig(format!("floor must be in (0, 1), got {}", self.floor)));
        }
        Ok(())
    }
}

/// Reshapes `probs` as a softmax over `ln p / temperature`. Zeros stay zero.
pub fn apply_temperature(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let max_log = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln() / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { (p.ln() / temperature - max_log).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Largest-remainder apportionment of `total` samples.
fn apportion(probs: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = probs.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn residuals(task: &[f64], counts: &[usize], emitted: usize) -> Vec<f64> {
    if emitted == 0 {
        return vec![0.0; task.len()];
    }
    task.iter()
        .zip(counts)
        .map(|(p, &c)| p - c as f64 / emitted as f64)
        .collect()
}

/// Running state of the quota family.
#[derive(Debug, Clone)]
struct QuotaState {
    probs: Vec<f64>,
    clamps: usize,
}

impl QuotaState {
    fn new(task: &[f64]) -> Self {
        Self {
            probs: task.to_vec(),
            clamps: 0,
        }
    }

    /// `P^{t+1} = P^t + lambda * d^t`, floored and renormalized.
    fn advance(&mut self, residual: &[f64], lambda: f64, floor: f64) {
        let mut clamped = false;
        for (p, d) in self.probs.iter_mut().zip(residual) {
            *p += lambda * d;
            if *p < floor {
                *p = floor;
                clamped = true;
            }
        }
        if clamped {
            self.clamps += 1;
        }
        let total: f64 = self.probs.iter().sum();
        for p in &mut self.probs {
            *p /= total;
        }
    }
}

/// Per-trial state of a synthetic generator.
#[derive(Debug, Clone)]
pub struct SyntheticTrial {
    spec: SyntheticSpec,
    task: TaskDistribution,
    temperature: f64,
    plan: Vec<usize>,
}

impl SyntheticTrial {
    pub fn new<R: Rng + ?Sized>(
        spec: &SyntheticSpec,
        task: TaskDistribution,
        temperature: f64,
        sample_count: usize,
        rng: &mut R,
    ) -> Result<Self, BackendError> {
        spec.validate()?;
        let plan = match spec.family {
            Family::D => match spec.plan_policy {
                PlanPolicy::IidDraw => {
                    let w = WeightedIndex::new(task.probs()).map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
                    (0..sample_count).map(|_| w.sample(rng)).collect()
                }
                PlanPolicy::SortedBlocks => apportion(task.probs(), sample_count)
                    .into_iter()
                    .enumerate()
                    .flat_map(|(i, c)| std::iter::repeat_n(i, c))
                    .collect(),
            },
            Family::E | Family::Quota => Vec::new(),
        };
        Ok(Self {
            spec: spec.clone(),
            task,
            temperature,
            plan,
        })
    }

    pub fn plan(&self) -> &[usize] {
        &self.plan
    }

    pub fn task(&self) -> &TaskDistribution {
        &self.task
    }

    fn d_step(&self, planned: usize) -> Vec<f64> {
        let n = self.task.len();
        let leak = self.spec.epsilon / (n - 1) as f64;
        let mut probs = vec![leak; n];
        probs[planned] = 1.0 - self.spec.epsilon;
        probs
    }

    /// Distribution at sample step `t` given the samples emitted before it.
    ///
    /// The quota family replays its update over `history[..t]`.
    pub fn step_distribution(&self, history: &[usize], t: usize) -> Result<Vec<f64>, BackendError> {
        let base = match self.spec.family {
            Family::E => self.task.probs().to_vec(),
            Family::D => {
                let planned = *self.plan.get(t).ok_or(BackendError::PlanExhausted {
                    step: t,
                    len: self.plan.len(),
                })?;
                self.d_step(planned)
            }
            Family::Quota => {
                let task = self.task.probs();
                let mut state = QuotaState::new(task);
                let mut counts = vec![0usize; task.len()];
                let prefix = &history[..t.min(history.len())];
                for (k, &s) in prefix.iter().enumerate() {
                    state.advance(&residuals(task, &counts, k), self.spec.lambda, self.spec.floor);
                    counts[s] += 1;
                }
                state.probs
            }
        };
        Ok(apply_temperature(&base, self.temperature))
    }
}

pub fn synthetic_step_distribution(
    trial: &SyntheticTrial,
    history: &[usize],
    t: usize,
) -> Result<StepDistribution, BackendError> {
    Ok(StepDistribution::new(t, trial.step_distribution(history, t)?))
}

/// Per-trial stream derived from the trial id, so trials are reproducible
/// in any execution order.
pub fn trial_rng(seed: u64, trial_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(trial_id.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn top_entries(task: &TaskDistribution, probs: &[f64]) -> Vec<TopEntry> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .map(|i| TopEntry::new(task.alphabet().symbols()[i].token_text.clone(), probs[i].ln()))
        .collect()
}

pub struct SyntheticBackend {
    config: BackendConfig,
    spec: SyntheticSpec,
}

impl SyntheticBackend {
    pub fn new(config: BackendConfig, spec: SyntheticSpec) -> Self {
        Self { config, spec }
    }
}

struct Emitter {
    steps: Vec<StepRecord>,
    text: String,
    max_tokens: usize,
    truncated: bool,
}

impl Emitter {
    fn push(&mut self, token: &str, top: Vec<TopEntry>) -> bool {
        if self.steps.len() >= self.max_tokens {
            self.truncated = true;
            return false;
        }
        self.text.push_str(token);
        self.steps.push(StepRecord::new(self.steps.len(), token, top));
        true
    }

    fn separator(&mut self, token: &str) -> bool {
        self.push(token, vec![TopEntry::new(token, 0.0)])
    }
}

impl Backend for SyntheticBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Transcript, BackendError> {
        let spec = &self.spec;
        let task = spec
            .task
            .clone()
            .or_else(|| request.target.clone())
            .ok_or(BackendError::MissingTarget)?;
        let mut rng = trial_rng(spec.seed, &request.trial_id);
        let trial = SyntheticTrial::new(spec, task.clone(), self.config.temperature, request.sample_count, &mut rng)?;
        let n = task.len();
        let mut out = Emitter {
            steps: Vec::new(),
            text: String::new(),
            max_tokens: self.config.max_tokens,
            truncated: false,
        };
        let mut counts = vec![0usize; n];
        let mut quota = QuotaState::new(task.probs());

        for k in 0..request.sample_count {
            if k > 0 && (!out.separator(",") || (spec.separators && !out.separator(" "))) {
                break;
            }
            let probs = match spec.family {
                Family::Quota => apply_temperature(&quota.probs, self.config.temperature),
                _ => trial.step_distribution(&[], k)?,
            };
            let symbol = match spec.family {
                Family::D => trial.plan[k],
                Family::Quota if spec.emission == QuotaEmission::LargestDeficit => (0..n)
                    .max_by(|&a, &b| {
                        let da = task.probs()[a] * (k + 1) as f64 - counts[a] as f64;
                        let db = task.probs()[b] * (k + 1) as f64 - counts[b] as f64;
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("alphabet is non-empty"),
                _ => WeightedIndex::new(&probs)
                    .map_err(|e| BackendError::InvalidConfig(e.to_string()))?
                    .sample(&mut rng),
            };
            let token = task.alphabet().symbols()[symbol].token_text.clone();
            if !out.push(&token, top_entries(&task, &probs)) {
                break;
            }
            if spec.family == Family::Quota {
                quota.advance(&residuals(task.probs(), &counts, k), spec.lambda, spec.floor);
            }
            counts[symbol] += 1;
        }

        Ok(Transcript {
            schema_version: SCHEMA_VERSION,
            trial_id: request.trial_id.clone(),
            prompt: request.prompt.clone(),
            output_text: out.text,
            steps: out.steps,
            meta: TranscriptMeta {
                model: self.config.model.clone(),
                temperature: self.config.temperature,
                top_k: self.config.top_k,
                timestamp: None,
                seed: Some(spec.seed),
                truncated: out.truncated,
                floor_clamps: (spec.family == Family::Quota).then_some(quota.clamps),
            },
        })
    }
}
