//! Frame sampling, cross-judge voting and per-video attribute annotation.
//!
//! Default fusion is frame-first: the judges vote on each sampled frame,
//! then the frame labels vote on the video. Video-level ties break by the
//! fixed label order of [`Label::closed_set`] and are flagged.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{parallel_map, FrameImage, JudgeClient, JudgeVerdict};
use crate::taxonomy::{Attribute, Label};

pub const DEFAULT_FRAMES_PER_VIDEO: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub total_frames: usize,
    pub k: usize,
    pub indices: Vec<usize>,
}

/// Uniformly spaced frame indices: `floor(i * total / n)` for `n = min(k, total)`.
pub fn sampling_plan(total_frames: usize, k: usize) -> Result<SamplingPlan> {
    if total_frames == 0 || k == 0 {
        return Err(Error::Contract(format!(
            "sampling needs at least one frame and k >= 1 (got {total_frames} frames, k = {k})"
        )));
    }
    let n = k.min(total_frames);
    let indices = (0..n).map(|i| i * total_frames / n).collect();
    Ok(SamplingPlan {
        total_frames,
        k,
        indices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame_index: usize,
    pub attribute: Attribute,
    pub label: Label,
    /// Sorted by judge id.
    pub verdicts: Vec<JudgeVerdict>,
}

/// Strict majority among identified labels, or `Unidentifiable`.
pub fn strict_majority(labels: impl IntoIterator<Item = Label>) -> Label {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    let mut identified = 0;
    for label in labels.into_iter().filter(|l| l.is_identified()) {
        *counts.entry(label).or_default() += 1;
        identified += 1;
    }
    counts
        .into_iter()
        .find(|&(_, n)| 2 * n > identified)
        .map_or(Label::Unidentifiable, |(label, _)| label)
}

/// Plurality among identified labels. Ties go to the label that comes first
/// in the fixed label order; the flag reports whether a tie occurred.
/// `None` when no label is identified.
pub fn plurality(labels: impl IntoIterator<Item = Label>) -> Option<(Label, bool)> {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for label in labels.into_iter().filter(|l| l.is_identified()) {
        *counts.entry(label).or_default() += 1;
    }
    let best = *counts.values().max()?;
    let mut top = counts.iter().filter(|&(_, &n)| n == best).map(|(l, _)| *l);
    let winner = top.next()?;
    Some((winner, top.next().is_some()))
}

/// Cross-judge vote for one frame and one attribute.
pub fn frame_ensemble(frame_index: usize, mut verdicts: Vec<JudgeVerdict>) -> Result<FrameLabel> {
    let Some(first) = verdicts.first() else {
        return Err(Error::Contract(format!("frame {frame_index} has no verdicts")));
    };
    let attribute = first.attribute;
    if let Some(v) = verdicts.iter().find(|v| v.attribute != attribute) {
        return Err(Error::Contract(format!(
            "frame {frame_index} mixes {attribute} and {} verdicts",
            v.attribute
        )));
    }
    if let Some(v) = verdicts.iter().find(|v| !v.label.belongs_to(attribute)) {
        return Err(Error::Contract(format!(
            "judge `{}` returned {} label `{}`",
            v.judge_id, attribute, v.label
        )));
    }
    verdicts.sort_by(|a, b| a.judge_id.cmp(&b.judge_id));
    Ok(FrameLabel {
        frame_index,
        attribute,
        label: strict_majority(verdicts.iter().map(|v| v.label)),
        verdicts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLabel {
    pub label: Label,
    pub valid: bool,
    pub tie: bool,
}

pub fn video_label(frames: &[FrameLabel]) -> VideoLabel {
    match plurality(frames.iter().map(|f| f.label)) {
        Some((label, tie)) => VideoLabel {
            label,
            valid: true,
            tie,
        },
        None => VideoLabel {
            label: Label::Unidentifiable,
            valid: false,
            tie: false,
        },
    }
}

/// Percentage of identified frames whose label equals `final_label`.
pub fn compute_tas(frames: &[FrameLabel], final_label: Label) -> Result<f64> {
    let valid = frames.iter().filter(|f| f.label.is_identified()).count();
    if valid == 0 {
        return Err(Error::Undefined("TAS over zero identified frames".into()));
    }
    let matching = frames.iter().filter(|f| f.label == final_label).count();
    Ok(100.0 * matching as f64 / valid as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// Judges vote per frame, then frames vote per video.
    #[default]
    FrameFirst,
    /// Each judge labels the video from its own frames, then judges vote.
    JudgeFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotateOptions {
    pub frames_per_video: usize,
    pub fusion: FusionOrder,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            frames_per_video: DEFAULT_FRAMES_PER_VIDEO,
            fusion: FusionOrder::FrameFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoManifestEntry {
    pub video_id: String,
    pub prompt_id: String,
    pub seed: u32,
    /// Expected number of frame files; checked when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<usize>,
}

/// A judge call that failed while other judges covered the frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub judge_id: String,
    pub frame_ref: String,
    pub attribute: Attribute,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub prompt_id: String,
    pub seed: u32,
    pub gender_frames: Vec<FrameLabel>,
    pub ethnicity_frames: Vec<FrameLabel>,
    pub video_gender: Label,
    pub video_ethnicity: Label,
    pub tas_gender: Option<f64>,
    pub tas_ethnicity: Option<f64>,
    pub valid_gender: bool,
    pub valid_ethnicity: bool,
    pub tie_gender: bool,
    pub tie_ethnicity: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_failures: Vec<JudgeFailure>,
}

impl VideoAnnotation {
    pub fn label(&self, attribute: Attribute) -> Label {
        match attribute {
            Attribute::Gender => self.video_gender,
            Attribute::Ethnicity => self.video_ethnicity,
        }
    }

    pub fn valid(&self, attribute: Attribute) -> bool {
        match attribute {
            Attribute::Gender => self.valid_gender,
            Attribute::Ethnicity => self.valid_ethnicity,
        }
    }

    pub fn tas(&self, attribute: Attribute) -> Option<f64> {
        match attribute {
            Attribute::Gender => self.tas_gender,
            Attribute::Ethnicity => self.tas_ethnicity,
        }
    }

    pub fn frames(&self, attribute: Attribute) -> &[FrameLabel] {
        match attribute {
            Attribute::Gender => &self.gender_frames,
            Attribute::Ethnicity => &self.ethnicity_frames,
        }
    }
}

/// Sampled frames of one video, loaded into memory.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub entry: VideoManifestEntry,
    /// (frame index, image) in sampling order.
    pub frames: Vec<(usize, FrameImage)>,
}

/// Frame file names under `frames_root/video_id`, sorted by name.
pub fn list_frame_files(frames_root: &Path, video_id: &str) -> Result<Vec<String>> {
    let dir = frames_root.join(video_id);
    let mut names = Vec::new();
    for item in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let item = item.map_err(|e| Error::io(&dir, e))?;
        let name = item.file_name().to_string_lossy().into_owned();
        let is_file = item.file_type().map_err(|e| Error::io(&dir, e))?.is_file();
        if is_file && !name.starts_with('.') {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Loads the sampled frames of `entry`. Frame references are recorded
/// relative to `frames_root` so artifacts do not depend on where the run lives.
pub fn load_video_frames(
    frames_root: &Path,
    entry: &VideoManifestEntry,
    frames_per_video: usize,
) -> Result<VideoFrames> {
    let names = list_frame_files(frames_root, &entry.video_id)?;
    if let Some(expected) = entry.frame_count {
        if expected != names.len() {
            return Err(Error::Input(format!(
                "video `{}`: manifest lists {expected} frames, found {}",
                entry.video_id,
                names.len()
            )));
        }
    }
    if names.is_empty() {
        return Err(Error::Input(format!("video `{}` has no frames", entry.video_id)));
    }
    let plan = sampling_plan(names.len(), frames_per_video)?;
    let frames = plan
        .indices
        .iter()
        .map(|&i| {
            let relative = format!("{}/{}", entry.video_id, names[i]);
            FrameImage::load(frames_root, &relative).map(|img| (i, img))
        })
        .collect::<Result<_>>()?;
    Ok(VideoFrames {
        entry: entry.clone(),
        frames,
    })
}

struct Task<'a> {
    slot: usize,
    attribute: Attribute,
    judge: &'a JudgeClient,
    frame: &'a FrameImage,
}

fn attribute_frames(
    frames: &VideoFrames,
    results: &mut BTreeMap<(usize, usize), Vec<JudgeVerdict>>,
    errors: &mut BTreeMap<(usize, usize), Error>,
    attr_slot: usize,
) -> Result<Vec<FrameLabel>> {
    let mut labels = Vec::with_capacity(frames.frames.len());
    for (slot, (frame_index, _)) in frames.frames.iter().enumerate() {
        let verdicts = results.remove(&(attr_slot, slot)).unwrap_or_default();
        if verdicts.is_empty() {
            return Err(errors.remove(&(attr_slot, slot)).unwrap_or_else(|| {
                Error::Contract(format!("frame {frame_index} produced no verdicts"))
            }));
        }
        labels.push(frame_ensemble(*frame_index, verdicts)?);
    }
    Ok(labels)
}

fn judge_first_label(frames: &[FrameLabel]) -> VideoLabel {
    let mut per_judge: BTreeMap<&str, Vec<Label>> = BTreeMap::new();
    for frame in frames {
        for v in &frame.verdicts {
            per_judge.entry(&v.judge_id).or_default().push(v.label);
        }
    }
    let mut tie = false;
    let votes: Vec<Label> = per_judge
        .values()
        .map(|labels| match plurality(labels.iter().copied()) {
            Some((label, t)) => {
                tie |= t;
                label
            }
            None => Label::Unidentifiable,
        })
        .collect();
    let label = strict_majority(votes);
    VideoLabel {
        label,
        valid: label.is_identified(),
        tie,
    }
}

fn summarize(frames: &[FrameLabel], fusion: FusionOrder) -> (VideoLabel, Option<f64>) {
    let video = match fusion {
        FusionOrder::FrameFirst => video_label(frames),
        FusionOrder::JudgeFirst => judge_first_label(frames),
    };
    let tas = if video.valid {
        compute_tas(frames, video.label).ok()
    } else {
        None
    };
    (video, tas)
}

/// Classifies every sampled frame with every judge for both attributes and
/// folds the verdicts into a [`VideoAnnotation`].
///
/// A failed judge call is recorded and tolerated as long as another judge
/// answered for the same frame and attribute; otherwise the error propagates.
pub fn annotate_video(
    frames: &VideoFrames,
    judges: &[JudgeClient],
    options: &AnnotateOptions,
) -> Result<VideoAnnotation> {
    if judges.is_empty() {
        return Err(Error::Config("at least one judge is required".into()));
    }
    if frames.frames.is_empty() {
        return Err(Error::Input(format!("video `{}` has no frames", frames.entry.video_id)));
    }
    const ATTRIBUTES: [Attribute; 2] = [Attribute::Gender, Attribute::Ethnicity];
    let mut tasks = Vec::new();
    for (attr_slot, &attribute) in ATTRIBUTES.iter().enumerate() {
        for (slot, (_, frame)) in frames.frames.iter().enumerate() {
            for judge in judges {
                tasks.push((attr_slot, Task {
                    slot,
                    attribute,
                    judge,
                    frame,
                }));
            }
        }
    }
    let workers: usize = judges.iter().map(|j| j.config().max_concurrent.max(1)).sum();
    let outcomes = parallel_map(&tasks, workers, |(_, t)| t.judge.classify_frame(t.frame, t.attribute));

    let mut results: BTreeMap<(usize, usize), Vec<JudgeVerdict>> = BTreeMap::new();
    let mut errors: BTreeMap<(usize, usize), Error> = BTreeMap::new();
    let mut failures = Vec::new();
    for ((attr_slot, task), outcome) in tasks.iter().zip(outcomes) {
        let key = (*attr_slot, task.slot);
        match outcome {
            Ok(v) => results.entry(key).or_default().push(v),
            Err(e) if e.is_external() => {
                failures.push(JudgeFailure {
                    judge_id: task.judge.judge_id().to_string(),
                    frame_ref: task.frame.reference.clone(),
                    attribute: task.attribute,
                    reason: e.to_string(),
                });
                errors.entry(key).or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }

    let gender_frames = attribute_frames(frames, &mut results, &mut errors, 0)?;
    let ethnicity_frames = attribute_frames(frames, &mut results, &mut errors, 1)?;
    for f in &failures {
        log::warn!("judge `{}` failed on {} ({}): {}", f.judge_id, f.frame_ref, f.attribute, f.reason);
    }

    let (g, tas_gender) = summarize(&gender_frames, options.fusion);
    let (e, tas_ethnicity) = summarize(&ethnicity_frames, options.fusion);
    Ok(VideoAnnotation {
        video_id: frames.entry.video_id.clone(),
        prompt_id: frames.entry.prompt_id.clone(),
        seed: frames.entry.seed,
        gender_frames,
        ethnicity_frames,
        video_gender: g.label,
        video_ethnicity: e.label,
        tas_gender,
        tas_ethnicity,
        valid_gender: g.valid,
        valid_ethnicity: e.valid,
        tie_gender: g.tie,
        tie_ethnicity: e.tie,
        judge_failures: failures,
    })
}

/// Annotates every manifest entry; output is sorted by video id.
pub fn annotate_videos(
    entries: &[VideoManifestEntry],
    frames_root: &Path,
    judges: &[JudgeClient],
    options: &AnnotateOptions,
) -> Result<Vec<VideoAnnotation>> {
    let mut sorted: Vec<&VideoManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].video_id == w[1].video_id) {
        return Err(Error::Input(format!("duplicate video_id `{}` in manifest", w[0].video_id)));
    }
    let mut out = Vec::with_capacity(sorted.len());
    for (i, entry) in sorted.into_iter().enumerate() {
        let frames = load_video_frames(frames_root, entry, options.frames_per_video)?;
        out.push(annotate_video(&frames, judges, options)?);
        log::info!("annotated {}/{}: {}", i + 1, entries.len(), entry.video_id);
    }
    Ok(out)
}
