//! Run configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets never appear in the file: services name the environment
//! variable that holds their key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{FusionOrder, DEFAULT_FRAMES_PER_VIDEO};
use crate::curation::CurationConfig;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::judge::{JudgeConfig, RewardConfig};
use crate::preference_mining::{Precedence, DEFAULT_MIN_PAIRS};
use crate::reward_probe::StandardizationScope;
use crate::taxonomy::Gender;

pub const DEFAULT_CONTEXTS_PER_ACTION: usize = 4;
pub const DEFAULT_SEEDS_PER_PROMPT: u32 = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Run directory for every artifact.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Reply journal; `<output>/journal.jsonl` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// Context catalog overriding the built-in one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference_images_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facefree: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    #[serde(default = "default_contexts")]
    pub contexts_per_action: usize,
    #[serde(default = "default_genders")]
    pub genders: Vec<Gender>,
    #[serde(default = "default_frames")]
    pub frames_per_video: usize,
    #[serde(default = "default_seeds")]
    pub seeds_per_prompt: u32,
}

fn default_contexts() -> usize {
    DEFAULT_CONTEXTS_PER_ACTION
}
fn default_genders() -> Vec<Gender> {
    vec![Gender::Man, Gender::Woman]
}
fn default_frames() -> usize {
    DEFAULT_FRAMES_PER_VIDEO
}
fn default_seeds() -> u32 {
    DEFAULT_SEEDS_PER_PROMPT
}

impl Default for Axes {
    fn default() -> Self {
        Axes {
            contexts_per_action: default_contexts(),
            genders: default_genders(),
            frames_per_video: default_frames(),
            seeds_per_prompt: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modes {
    #[serde(default)]
    pub fusion: FusionOrder,
    #[serde(default)]
    pub standardization: StandardizationScope,
    #[serde(default)]
    pub precedence: Precedence,
    #[serde(default = "default_min_pairs")]
    pub min_pairs: usize,
}

fn default_min_pairs() -> usize {
    DEFAULT_MIN_PAIRS
}

impl Default for Modes {
    fn default() -> Self {
        Modes {
            fusion: FusionOrder::default(),
            standardization: StandardizationScope::default(),
            precedence: Precedence::default(),
            min_pairs: default_min_pairs(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub axes: Axes,
    #[serde(default)]
    pub modes: Modes,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judges: Vec<JudgeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_judge: Option<JudgeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardConfig>,
    #[serde(default)]
    pub curation: CurationConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl AuditConfig {
    pub fn from_toml(text: &str) -> Result<AuditConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads `path` and resolves relative paths against its directory.
    pub fn from_path(path: &Path) -> Result<AuditConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = AuditConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        resolve(base, &mut p.output);
        for opt in [
            &mut p.cache,
            &mut p.catalog,
            &mut p.prompts,
            &mut p.frames_root,
            &mut p.video_manifest,
            &mut p.images_root,
            &mut p.image_manifest,
            &mut p.preferences,
            &mut p.preference_images_root,
            &mut p.facefree,
        ] {
            if let Some(path) = opt.as_mut() {
                resolve(base, path);
            }
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.paths
            .cache
            .clone()
            .unwrap_or_else(|| self.paths.output.join("journal.jsonl"))
    }

    /// Digest of the canonical JSON form of the configuration.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
