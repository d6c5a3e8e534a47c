//! Shared helpers for the CLI integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bias_audit::annotation::VideoManifestEntry;
use bias_audit::catalog::{generate_prompt_set, Catalog, PromptSetting, PromptSpec};
use bias_audit::config::AuditConfig;
use bias_audit::judge::JudgeConfig;
use bias_audit::testkit::write_frames;
use bias_audit::taxonomy::{Ethnicity, Gender, Label};
use serde_json::{json, Value};

pub const JUDGES: [&str; 3] = ["judge-a", "judge-b", "judge-c"];

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bias-audit")
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn bias-audit")
}

pub fn cli_ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "bias-audit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn prompts(setting: PromptSetting, contexts: usize) -> Vec<PromptSpec> {
    let genders: &[Gender] = if setting.has_gender() { &[Gender::Man, Gender::Woman] } else { &[] };
    generate_prompt_set(&Catalog::builtin(), setting, contexts, genders).unwrap()
}

pub fn find_prompt<'a>(prompts: &'a [PromptSpec], action: &str, ethnicity: Option<Ethnicity>) -> &'a PromptSpec {
    prompts
        .iter()
        .find(|p| p.action.name() == action && p.ethnicity == ethnicity)
        .unwrap_or_else(|| panic!("no prompt for {action} {ethnicity:?}"))
}

/// What the ensemble should conclude for one frame, plus whether one judge
/// is planted to disagree.
#[derive(Debug, Clone, Copy)]
pub struct PlannedFrame {
    pub gender: Option<Gender>,
    pub ethnicity: Option<Ethnicity>,
    pub noisy: bool,
}

impl PlannedFrame {
    pub fn new(gender: Gender, ethnicity: Ethnicity) -> PlannedFrame {
        PlannedFrame {
            gender: Some(gender),
            ethnicity: Some(ethnicity),
            noisy: false,
        }
    }

    pub fn noisy(mut self) -> PlannedFrame {
        self.noisy = true;
        self
    }

    pub fn payload(&self) -> Value {
        let gender = match (self.gender, self.noisy) {
            (Some(g), false) => json!(g.as_str()),
            (Some(g), true) => {
                let other = if g == Gender::Man { "woman" } else { "man" };
                json!({"judge-c": other, "*": g.as_str()})
            }
            (None, _) => json!("I can't tell from this frame."),
        };
        let ethnicity = match (self.ethnicity, self.noisy) {
            (Some(e), false) => json!(e.as_str()),
            (Some(e), true) => {
                let other = if e == Ethnicity::White { "Black" } else { "White" };
                json!({"judge-a": other, "*": e.as_str()})
            }
            (None, _) => json!("Sorry, I cannot determine ethnicity."),
        };
        json!({"gender": gender, "ethnicity": ethnicity})
    }
}

#[derive(Debug, Clone)]
pub struct PlannedVideo {
    pub video_id: String,
    pub prompt: PromptSpec,
    pub frames: Vec<PlannedFrame>,
}

impl PlannedVideo {
    /// Plurality of the planted frame labels, ties to the first label in order.
    pub fn label(&self, gender: bool) -> Option<Label> {
        let labels: Vec<Label> = self
            .frames
            .iter()
            .filter_map(|f| if gender { f.gender.map(Label::Gender) } else { f.ethnicity.map(Label::Ethnicity) })
            .collect();
        let mut best: Option<(usize, Label)> = None;
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        for l in sorted {
            let n = labels.iter().filter(|x| **x == l).count();
            if best.is_none_or(|(b, _)| n > b) {
                best = Some((n, l));
            }
        }
        best.map(|(_, l)| l)
    }

    pub fn tas(&self, gender: bool) -> Option<f64> {
        let label = self.label(gender)?;
        let identified: Vec<Label> = self
            .frames
            .iter()
            .filter_map(|f| if gender { f.gender.map(Label::Gender) } else { f.ethnicity.map(Label::Ethnicity) })
            .collect();
        let matching = identified.iter().filter(|l| **l == label).count();
        Some(100.0 * matching as f64 / identified.len() as f64)
    }
}

pub struct Fixture {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub config: AuditConfig,
}

pub fn judge_configs(url: &str, order: &[&str]) -> Vec<JudgeConfig> {
    order
        .iter()
        .map(|id| {
            let mut c = JudgeConfig::chat(id, url, id);
            c.retry_backoff_ms = 1;
            c.retry_budget = 1;
            c.timeout_ms = 10_000;
            c
        })
        .collect()
}

/// Writes frames, the video manifest, the prompt file and a config using
/// the given judges into `root`.
pub fn write_video_fixture(
    root: &Path,
    prompts: &[PromptSpec],
    videos: &[PlannedVideo],
    judges: Vec<JudgeConfig>,
    frames_per_video: usize,
) -> Fixture {
    let frames_root = root.join("frames");
    let mut manifest = Vec::new();
    for v in videos {
        let payloads: Vec<Value> = v.frames.iter().map(PlannedFrame::payload).collect();
        write_frames(&frames_root, &v.video_id, &payloads).unwrap();
        manifest.push(VideoManifestEntry {
            video_id: v.video_id.clone(),
            prompt_id: v.prompt.id.clone(),
            seed: 0,
            frame_count: Some(v.frames.len()),
        });
    }
    bias_audit::jsonl::write_all(&root.join("videos.jsonl"), &manifest).unwrap();
    bias_audit::jsonl::write_all(&root.join("prompts.jsonl"), prompts).unwrap();

    let mut config = AuditConfig::default();
    config.paths.output = root.join("out");
    config.paths.prompts = Some(root.join("prompts.jsonl"));
    config.paths.frames_root = Some(frames_root);
    config.paths.video_manifest = Some(root.join("videos.jsonl"));
    config.axes.frames_per_video = frames_per_video;
    config.judges = judges;
    let config_path = root.join("audit.toml");
    std::fs::write(&config_path, config.to_toml().unwrap()).unwrap();
    Fixture {
        root: root.to_path_buf(),
        config_path,
        config,
    }
}

pub fn rewrite_config(fixture: &mut Fixture, edit: impl FnOnce(&mut AuditConfig)) {
    edit(&mut fixture.config);
    std::fs::write(&fixture.config_path, fixture.config.to_toml().unwrap()).unwrap();
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}
