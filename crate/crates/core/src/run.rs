//! Run manifests tying artifacts to the configuration and inputs that made them.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::AuditConfig;
use crate::digest::{fields_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::judge::{JudgeConfig, RewardConfig};

pub const RUN_MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_digest: String,
    /// Input name to content digest.
    pub inputs: BTreeMap<String, String>,
    pub judges: Vec<JudgeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardConfig>,
    pub seeds_per_prompt: u32,
    pub catalog_version: String,
    pub tool_version: String,
    pub started_at: u64,
    pub finished_at: u64,
    /// False while the run is in progress or was interrupted.
    #[serde(default)]
    pub complete: bool,
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Digest of a file's content.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

impl RunManifest {
    /// The run id depends only on the command, the configuration and the
    /// input digests, so a resumed run keeps its id.
    pub fn start(
        command: &str,
        config: &AuditConfig,
        inputs: BTreeMap<String, String>,
        catalog_version: &str,
    ) -> RunManifest {
        let config_digest = config.digest();
        let mut fields = vec![command.to_string(), config_digest.clone()];
        for (k, v) in &inputs {
            fields.push(k.clone());
            fields.push(v.clone());
        }
        let run_id = fields_digest(&fields)[..16].to_string();
        let started_at = now();
        RunManifest {
            run_id,
            command: command.into(),
            config_digest,
            inputs,
            judges: config.judges.clone(),
            reward: config.reward.clone(),
            seeds_per_prompt: config.axes.seeds_per_prompt,
            catalog_version: catalog_version.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at,
            finished_at: started_at,
            complete: false,
            artifacts: Vec::new(),
        }
    }

    /// Records `path` (relative to `root` when possible) with its digest.
    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.artifacts.push(Artifact {
            path: rel.to_string_lossy().into_owned(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    /// Writes the manifest as in progress so an interrupted run can be resumed.
    pub fn begin(&self, dir: &Path) -> Result<()> {
        self.write(dir)
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_at = now();
        self.complete = true;
        self.write(dir)
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
