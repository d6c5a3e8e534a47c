//! Gender and ethnicity preference patterns in pairwise human preference data.
//!
//! Each record pairs two images generated from one caption with the index
//! of the image a human preferred. Attributes come from the caption (via a
//! caption judge) and from the images (via an ensemble of vision judges);
//! by default the caption wins when it states an attribute.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::frame_ensemble;
use crate::error::{Error, Result};
use crate::judge::{parallel_map, AttributeSource, CaptionAttributes, FrameImage, JudgeClient};
use crate::metrics::EthnicityMap;
use crate::taxonomy::{Action, Attribute, Ethnicity, Gender, Label};

pub const DEFAULT_MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub caption: String,
    /// Image paths relative to the images root.
    pub images: [String; 2],
    /// Index of the preferred image.
    pub preferred: u8,
    #[serde(default)]
    pub source: String,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.preferred > 1 {
            return Err(Error::Input(format!("preferred index {} is not 0 or 1", self.preferred)));
        }
        if self.images[0] == self.images[1] {
            return Err(Error::Input(format!("both images are `{}`", self.images[0])));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::Input("empty caption".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precedence {
    /// Caption attributes win when present; images fill the gaps.
    #[default]
    CaptionFirst,
    /// Identified image attributes win; the caption fills the gaps.
    ImageFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    pub record: PreferenceRecord,
    pub action: Action,
    pub caption_attributes: CaptionAttributes,
    /// Vision-ensemble labels per image; unidentifiable when not queried.
    pub image_gender: [Label; 2],
    pub image_ethnicity: [Label; 2],
    /// Fused attributes per image.
    pub gender: [Option<Gender>; 2],
    pub ethnicity: [Option<Ethnicity>; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl MinedPair {
    pub fn preferred_gender(&self) -> Option<Gender> {
        self.gender[usize::from(self.record.preferred)]
    }

    pub fn preferred_ethnicity(&self) -> Option<Ethnicity> {
        self.ethnicity[usize::from(self.record.preferred)]
    }

    /// One image is a man and the other a woman.
    pub fn is_man_woman(&self) -> bool {
        matches!(
            self.gender,
            [Some(Gender::Man), Some(Gender::Woman)] | [Some(Gender::Woman), Some(Gender::Man)]
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningOutcome {
    pub pairs: Vec<MinedPair>,
    pub records: usize,
    pub invalid: usize,
    pub no_action: usize,
    /// Records where at least one judge call failed.
    pub degraded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningOptions {
    pub precedence: Precedence,
}

impl Default for MiningOptions {
    fn default() -> Self {
        MiningOptions {
            precedence: Precedence::CaptionFirst,
        }
    }
}

fn fuse<T: Copy>(caption: Option<T>, image: Option<T>, precedence: Precedence) -> Option<T> {
    match precedence {
        Precedence::CaptionFirst => caption.or(image),
        Precedence::ImageFirst => image.or(caption),
    }
}

fn image_label(
    image: &FrameImage,
    attribute: Attribute,
    judges: &[JudgeClient],
    failures: &mut Vec<String>,
) -> Label {
    let mut verdicts = Vec::new();
    for judge in judges {
        match judge.classify_frame(image, attribute) {
            Ok(v) => verdicts.push(v),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if verdicts.is_empty() {
        return Label::Unidentifiable;
    }
    match frame_ensemble(0, verdicts) {
        Ok(f) => f.label,
        Err(e) => {
            failures.push(e.to_string());
            Label::Unidentifiable
        }
    }
}

enum Mined {
    Pair(Box<MinedPair>),
    Invalid,
    NoAction,
}

fn mine_one(
    record: &PreferenceRecord,
    caption_judge: &JudgeClient,
    image_judges: &[JudgeClient],
    images_root: &Path,
    options: &MiningOptions,
) -> Mined {
    if let Err(e) = record.validate() {
        log::warn!("skipping preference record: {e}");
        return Mined::Invalid;
    }
    let mut failures = Vec::new();
    let caption = caption_judge
        .extract_caption_attributes(&record.caption)
        .unwrap_or_else(|e| {
            failures.push(e.to_string());
            CaptionAttributes::empty(AttributeSource::CaptionLlm)
        });
    let Some(action) = caption.action else {
        return Mined::NoAction;
    };

    let caption_complete = caption.gender.is_some() && caption.ethnicity.is_some();
    let mut image_gender = [Label::Unidentifiable; 2];
    let mut image_ethnicity = [Label::Unidentifiable; 2];
    if !(options.precedence == Precedence::CaptionFirst && caption_complete) && !image_judges.is_empty() {
        for (slot, path) in record.images.iter().enumerate() {
            match FrameImage::load(images_root, path) {
                Ok(image) => {
                    image_gender[slot] = image_label(&image, Attribute::Gender, image_judges, &mut failures);
                    image_ethnicity[slot] = image_label(&image, Attribute::Ethnicity, image_judges, &mut failures);
                }
                Err(e) => failures.push(e.to_string()),
            }
        }
    }

    let p = options.precedence;
    let gender = [0, 1].map(|i| fuse(caption.gender, image_gender[i].gender(), p));
    let ethnicity = [0, 1].map(|i| fuse(caption.ethnicity, image_ethnicity[i].ethnicity(), p));
    Mined::Pair(Box::new(MinedPair {
        record: record.clone(),
        action,
        caption_attributes: caption,
        image_gender,
        image_ethnicity,
        gender,
        ethnicity,
        failures,
    }))
}

/// Extracts and fuses attributes for every record. Records without a
/// recognised action are dropped and counted; judge failures only degrade
/// the affected record.
pub fn mine_attributes(
    records: &[PreferenceRecord],
    caption_judge: &JudgeClient,
    image_judges: &[JudgeClient],
    images_root: &Path,
    options: &MiningOptions,
) -> MiningOutcome {
    let workers = image_judges
        .iter()
        .chain(std::iter::once(caption_judge))
        .map(|j| j.config().max_concurrent.max(1))
        .sum();
    let mined = parallel_map(records, workers, |r| {
        mine_one(r, caption_judge, image_judges, images_root, options)
    });
    let mut out = MiningOutcome {
        records: records.len(),
        ..MiningOutcome::default()
    };
    for m in mined {
        match m {
            Mined::Pair(p) => {
                out.degraded += usize::from(!p.failures.is_empty());
                out.pairs.push(*p);
            }
            Mined::Invalid => out.invalid += 1,
            Mined::NoAction => out.no_action += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPreference {
    pub action: Action,
    pub wins_man: usize,
    pub wins_woman: usize,
    /// `(wins_man - wins_woman) / (wins_man + wins_woman)`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedAction {
    pub action: Action,
    pub pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub actions: usize,
    pub man_preferred: usize,
    pub woman_preferred: usize,
    pub neutral: usize,
    pub man_preferred_pct: Option<f64>,
    pub woman_preferred_pct: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenderPreference {
    pub min_pairs: usize,
    pub actions: Vec<ActionPreference>,
    pub excluded: Vec<ExcludedAction>,
    pub summary: PreferenceSummary,
}

/// Per-action gender preference over man-versus-woman pairs. Actions with
/// fewer than `min_pairs` qualifying pairs are excluded and listed.
pub fn gender_preference_per_action(pairs: &[MinedPair], min_pairs: usize) -> GenderPreference {
    let mut wins: BTreeMap<Action, (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let entry = wins.entry(p.action).or_default();
        if !p.is_man_woman() {
            continue;
        }
        match p.preferred_gender() {
            Some(Gender::Man) => entry.0 += 1,
            Some(Gender::Woman) => entry.1 += 1,
            _ => {}
        }
    }
    let mut out = GenderPreference {
        min_pairs,
        ..GenderPreference::default()
    };
    for (action, (m, w)) in wins {
        let n = m + w;
        if n == 0 || n < min_pairs {
            out.excluded.push(ExcludedAction { action, pairs: n });
            continue;
        }
        let score = (m as f64 - w as f64) / n as f64;
        match score.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => out.summary.man_preferred += 1,
            Some(std::cmp::Ordering::Less) => out.summary.woman_preferred += 1,
            _ => out.summary.neutral += 1,
        }
        out.actions.push(ActionPreference {
            action,
            wins_man: m,
            wins_woman: w,
            score,
        });
    }
    let total = out.actions.len();
    out.summary.actions = total;
    if total > 0 {
        out.summary.man_preferred_pct = Some(100.0 * out.summary.man_preferred as f64 / total as f64);
        out.summary.woman_preferred_pct = Some(100.0 * out.summary.woman_preferred as f64 / total as f64);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EthnicityDistribution {
    pub counts: EthnicityMap<usize>,
    pub identified: usize,
    pub unidentified: usize,
    pub percentages: Option<EthnicityMap<f64>>,
}

/// Percentage of preferred images per ethnicity over identified records.
pub fn ethnicity_preference_distribution(pairs: &[MinedPair]) -> EthnicityDistribution {
    let mut counts: EthnicityMap<usize> = Ethnicity::ALL.iter().map(|&e| (e, 0)).collect();
    let mut unidentified = 0;
    for p in pairs {
        match p.preferred_ethnicity() {
            Some(e) => *counts.get_mut(&e).expect("all ethnicities present") += 1,
            None => unidentified += 1,
        }
    }
    let identified: usize = counts.values().sum();
    let percentages = (identified > 0).then(|| {
        counts
            .iter()
            .map(|(&e, &n)| (e, 100.0 * n as f64 / identified as f64))
            .collect()
    });
    EthnicityDistribution {
        counts,
        identified,
        unidentified,
        percentages,
    }
}
