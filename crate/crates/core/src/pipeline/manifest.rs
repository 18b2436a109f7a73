use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Stage};
use crate::io::{file_digest, read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Artifact path relative to the run directory -> sha256.
    pub artifacts: BTreeMap<String, String>,
    /// Upstream artifacts this stage consumed, with the digests it saw.
    pub inputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    /// Files outside the run directory that the stage read, with digests.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_digest: &str, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config_digest.to_string(),
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>, PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path)
            .map(Some)
            .map_err(|e| PipelineError::Dependency(format!("unreadable manifest {}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), PipelineError> {
        write_json(&run_dir.join(MANIFEST_FILE), self).map_err(|e| PipelineError::io(run_dir, e))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(stage.name())
    }

    /// Current digests of every artifact of `stage`, verified against disk.
    pub fn verified_artifacts(&self, run_dir: &Path, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let rec = self
            .stage(stage)
            .ok_or_else(|| PipelineError::Dependency(format!("stage `{}` has not been run", stage.name())))?;
        for (rel, want) in &rec.artifacts {
            let got = file_digest(&run_dir.join(rel))
                .map_err(|_| PipelineError::Dependency(format!("artifact {rel} of stage `{}` is missing", stage.name())))?;
            if &got != want {
                return Err(PipelineError::Dependency(format!(
                    "artifact {rel} changed since stage `{}` ran",
                    stage.name()
                )));
            }
        }
        // the upstream stage itself must not be stale
        for (rel, seen) in &rec.inputs {
            if self.current_digest(rel).as_ref() != Some(seen) {
                return Err(PipelineError::Dependency(format!(
                    "stage `{}` was built from an older {rel}; re-run it",
                    stage.name()
                )));
            }
        }
        Ok(rec.artifacts.clone())
    }

    fn current_digest(&self, rel: &str) -> Option<String> {
        self.stages.values().find_map(|r| r.artifacts.get(rel).cloned())
    }

    /// Record a finished stage. Downstream stages built from older artifacts
    /// are left in place and rejected by [`Self::verified_artifacts`].
    pub fn record(&mut self, stage: Stage, record: StageRecord) {
        self.stages.insert(stage.name().to_string(), record);
    }
}
