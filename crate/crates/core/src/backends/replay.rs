use std::collections::HashMap;
use std::path::Path;

use super::{load_all, Backend, BackendError, GenerationRequest, StoreError, Transcript};

/// Loads a store file, or every `*.jsonl` file below a directory in path order.
pub fn load_path(path: &Path) -> Result<Vec<Transcript>, StoreError> {
    if !path.is_dir() {
        return load_all(path);
    }
    let mut files = Vec::new();
    let mut pending = vec![path.to_path_buf()];
    while let Some(dir) = pending.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        for entry in entries {
            let p = entry
                .map_err(|source| StoreError::Io {
                    path: dir.clone(),
                    source,
                })?
                .path();
            if p.is_dir() {
                pending.push(p);
            } else if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load_all(&f)?);
    }
    Ok(out)
}

/// Serves transcripts from a store by trial id.
pub struct ReplayBackend {
    by_id: HashMap<String, Transcript>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let by_id = load_path(path)?
            .into_iter()
            .map(|t| (t.trial_id.clone(), t))
            .collect();
        Ok(Self { by_id })
    }

    pub fn from_transcripts(transcripts: impl IntoIterator<Item = Transcript>) -> Self {
        Self {
            by_id: transcripts.into_iter().map(|t| (t.trial_id.clone(), t)).collect(),
        }
    }
}

impl Backend for ReplayBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Transcript, BackendError> {
        let t = self
            .by_id
            .get(&request.trial_id)
            .ok_or_else(|| BackendError::ReplayMissing(request.trial_id.clone()))?;
        if t.prompt != request.prompt {
            return Err(BackendError::ReplayPromptMismatch(request.trial_id.clone()));
        }
        Ok(t.clone())
    }
}
