use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::backends::{BackendConfig, BackendKind};
use crate::dist::{PromptKind, PromptSpec};

pub const DEFAULT_RUNS_PER_CELL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Minimum mean e-score of a D-model.
    #[serde(default = "default_d_escore_min")]
    pub d_escore_min: f64,
    /// Minimum excess of e-score over the task's largest probability.
    #[serde(default = "default_margin_min")]
    pub margin_min: f64,
}

fn default_d_escore_min() -> f64 {
    0.9
}
fn default_margin_min() -> f64 {
    0.15
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            d_escore_min: default_d_escore_min(),
            margin_min: default_margin_min(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub id: String,
    #[serde(flatten)]
    pub spec: PromptSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDumpConfig {
    pub path: PathBuf,
    /// Task the traced prompt was sampling from.
    pub task: String,
    #[serde(default)]
    pub jump_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudiesConfig {
    /// Temperatures for the sweep; empty disables it.
    #[serde(default)]
    pub temperature_grid: Vec<f64>,
    /// Task used by the sweep; defaults to the first simulated task.
    #[serde(default)]
    pub sweep_task: Option<String>,
    #[serde(default)]
    pub first_token_corpus: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub quota: bool,
    #[serde(default)]
    pub layer_dumps: Vec<LayerDumpConfig>,
}

fn default_true() -> bool {
    true
}

fn default_runs() -> usize {
    DEFAULT_RUNS_PER_CELL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskConfig>,
    pub backends: Vec<BackendConfig>,
    #[serde(default = "default_runs")]
    pub runs_per_cell: usize,
    /// Overrides the seed of every synthetic backend.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub studies: StudiesConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.studies.first_token_corpus.as_mut() {
            fix(p);
        }
        for d in &mut self.studies.layer_dumps {
            fix(&mut d.path);
        }
        for b in &mut self.backends {
            if let BackendKind::Replay { store } = &mut b.kind {
                fix(store);
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.runs_per_cell == 0 {
            return bad("runs_per_cell must be at least 1".into());
        }
        if let Some(t) = self.studies.temperature_grid.iter().find(|t| !(**t > 0.0)) {
            return bad(format!("temperature {t} must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            if !seen.insert(&t.id) {
                return bad(format!("duplicate task id {:?}", t.id));
            }
            t.spec.validate().map_err(|e| HarnessError::Config(format!("task {}: {e}", t.id)))?;
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.backends {
            if !seen.insert(&b.id) {
                return bad(format!("duplicate backend id {:?}", b.id));
            }
            b.validate()
                .map_err(|e| HarnessError::Config(format!("backend {}: {e}", b.id)))?;
        }
        if let Some(id) = &self.studies.sweep_task {
            if self.task(id).is_none() {
                return bad(format!("sweep_task {id:?} is not a task"));
            }
        }
        for d in &self.studies.layer_dumps {
            if self.task(&d.task).is_none() {
                return bad(format!("layer dump task {:?} is not a task", d.task));
            }
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn sweep_task(&self) -> Option<&TaskConfig> {
        match &self.studies.sweep_task {
            Some(id) => self.task(id),
            None => self.tasks.iter().find(|t| t.spec.kind == PromptKind::Simulated),
        }
    }

    /// Applies `seed` to every synthetic backend.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            for b in &mut self.backends {
                if let BackendKind::Synthetic(spec) = &mut b.kind {
                    spec.seed = seed;
                }
            }
        }
    }

    /// Same experiment with every backend replaced by replay from `store`.
    pub fn as_replay(&self, store: &Path) -> Self {
        let mut cfg = self.clone();
        for b in &mut cfg.backends {
            b.kind = BackendKind::Replay {
                store: store.to_path_buf(),
            };
        }
        cfg
    }
}
