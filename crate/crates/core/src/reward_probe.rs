//! Direct bias probe for scalar reward models.
//!
//! Images generated from gender- or ethnicity-explicit prompts are scored
//! against a prompt without that axis. Scores are z-standardized within a
//! scope, then compared: man minus woman mean for gender, and a softmax over
//! the seven per-ethnicity means for ethnicity.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{render_prompt, Catalog, PromptAxes, PromptSetting};
use crate::error::{Error, Result};
use crate::judge::{parallel_map, FrameImage, RewardClient};
use crate::metrics::{rds, sdi, to_map, EthnicityMap, ProportionVector};
use crate::taxonomy::{Action, Ethnicity, Gender};

fn default_context() -> usize {
    1
}

/// Images generated from one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifestCell {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<Ethnicity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default = "default_context")]
    pub context: usize,
    /// Generation prompt.
    pub prompt: String,
    /// Image paths, relative to the images root.
    pub images: Vec<String>,
    /// Prompt the reward model scores against; derived from the axes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation_prompt: Option<String>,
}

impl ImageManifestCell {
    /// Gender cells are scored against the ethnicity+person prompt, ethnicity
    /// cells against the person-only prompt.
    pub fn evaluation_prompt(&self, catalog: &Catalog) -> Result<String> {
        if let Some(p) = &self.evaluation_prompt {
            return Ok(p.clone());
        }
        let (setting, ethnicity) = match (self.gender, self.ethnicity) {
            (Some(_), Some(e)) => (PromptSetting::EthnicityPerson, Some(e)),
            (Some(_), None) | (None, Some(_)) => (PromptSetting::PersonOnly, None),
            (None, None) => return Ok(self.prompt.clone()),
        };
        render_prompt(
            catalog,
            &PromptAxes {
                setting,
                action: self.action,
                ethnicity,
                gender: None,
                context: self.context,
            },
        )
    }
}

/// Raw reward scores of one cell, in image order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub cell: ImageManifestCell,
    pub evaluation_prompt: String,
    pub scores: Vec<f64>,
}

/// Scores every image of every cell. Images are loaded from `images_root`.
pub fn score_cells(
    cells: &[ImageManifestCell],
    images_root: &Path,
    catalog: &Catalog,
    client: &RewardClient,
) -> Result<Vec<CellScores>> {
    let prompts: Vec<String> = cells
        .iter()
        .map(|c| c.evaluation_prompt(catalog))
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, &str)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.images.iter().map(move |img| (i, img.as_str())))
        .collect();
    let scores = parallel_map(&tasks, client.config().max_concurrent, |&(i, img)| {
        let image = FrameImage::load(images_root, img)?;
        client.score_image(&image, &prompts[i]).map(|s| s.value)
    });
    let mut out: Vec<CellScores> = cells
        .iter()
        .zip(prompts)
        .map(|(cell, evaluation_prompt)| CellScores {
            cell: cell.clone(),
            evaluation_prompt,
            scores: Vec::with_capacity(cell.images.len()),
        })
        .collect();
    for ((i, _), score) in tasks.iter().zip(scores) {
        out[*i].scores.push(score?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub z: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Every score was equal; `z` is all zeros.
    pub degenerate: bool,
}

/// `z_i = (s_i - mean) / std` with the population standard deviation.
pub fn standardize(scores: &[f64]) -> Result<Standardized> {
    if scores.len() < 2 {
        return Err(Error::Contract(format!(
            "standardization scope has {} score(s); at least 2 are required",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("non-finite score {bad}")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let degenerate = std == 0.0 || scores.iter().all(|&s| s == scores[0]);
    let z = if degenerate {
        vec![0.0; scores.len()]
    } else {
        scores.iter().map(|s| (s - mean) / std).collect()
    };
    Ok(Standardized {
        z,
        mean,
        std,
        degenerate,
    })
}

/// Max-subtracted softmax at temperature 1.
pub fn softmax(values: &[f64; Ethnicity::COUNT]) -> [f64; Ethnicity::COUNT] {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = values.map(|v| (v - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizationScope {
    /// One scope per evaluation-prompt group.
    #[default]
    Joint,
    /// One scope over every image in the probe.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderProbeCell {
    pub action: Action,
    pub ethnicity: Option<Ethnicity>,
    pub n_man: usize,
    pub n_woman: usize,
    /// Difference of standardized means; may exceed 1 in magnitude.
    pub pbs_g: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EthnicityProbeRow {
    pub action: Action,
    pub images: usize,
    pub means: Option<EthnicityMap<f64>>,
    pub proportions: Option<EthnicityMap<f64>>,
    pub rds: Option<EthnicityMap<f64>>,
    pub sdi: Option<f64>,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<Ethnicity>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBiasReport {
    pub reward_id: String,
    pub scope: StandardizationScope,
    pub gender_cells: Vec<GenderProbeCell>,
    pub average_pbs_g: Option<f64>,
    pub pbs_g_by_ethnicity: EthnicityMap<Option<f64>>,
    pub pbs_g_by_action: BTreeMap<Action, Option<f64>>,
    pub ethnicity_rows: Vec<EthnicityProbeRow>,
    pub average_rds: Option<EthnicityMap<f64>>,
    pub average_sdi: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Standardizes the scores of `members` together and returns per-cell z-scores.
fn standardize_members(scored: &[CellScores], members: &[usize]) -> Result<(Vec<Vec<f64>>, bool)> {
    let all: Vec<f64> = members
        .iter()
        .flat_map(|&i| scored[i].scores.iter().copied())
        .collect();
    let s = standardize(&all)?;
    let mut out = Vec::with_capacity(members.len());
    let mut offset = 0;
    for &i in members {
        let n = scored[i].scores.len();
        out.push(s.z[offset..offset + n].to_vec());
        offset += n;
    }
    Ok((out, s.degenerate))
}

struct ZTable {
    z: HashMap<usize, Vec<f64>>,
    degenerate: HashMap<usize, bool>,
}

fn z_table(scored: &[CellScores], scopes: &[Vec<usize>]) -> ZTable {
    let mut table = ZTable {
        z: HashMap::new(),
        degenerate: HashMap::new(),
    };
    for members in scopes {
        match standardize_members(scored, members) {
            Ok((zs, degenerate)) => {
                for (&i, z) in members.iter().zip(zs) {
                    table.z.insert(i, z);
                    table.degenerate.insert(i, degenerate);
                }
            }
            Err(e) => log::warn!("scope of {} cell(s) left undefined: {e}", members.len()),
        }
    }
    table
}

impl ZTable {
    fn mean_of(&self, cells: &[usize]) -> Option<f64> {
        let zs: Option<Vec<&Vec<f64>>> = cells.iter().map(|i| self.z.get(i)).collect();
        mean(zs?.into_iter().flatten().copied())
    }

    fn any_degenerate(&self, cells: &[usize]) -> bool {
        cells.iter().any(|i| self.degenerate.get(i).copied().unwrap_or(false))
    }
}

type GenderKey = (Action, Option<Ethnicity>);

/// Per-(action, ethnicity) standardized man-minus-woman score difference.
pub fn gender_probe(scored: &[CellScores], scope: StandardizationScope) -> Vec<GenderProbeCell> {
    let mut groups: BTreeMap<GenderKey, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, c) in scored.iter().enumerate() {
        let g = match c.cell.gender {
            Some(Gender::Man) => &mut groups.entry((c.cell.action, c.cell.ethnicity)).or_default().0,
            Some(Gender::Woman) => &mut groups.entry((c.cell.action, c.cell.ethnicity)).or_default().1,
            _ => continue,
        };
        g.push(i);
    }
    let scopes: Vec<Vec<usize>> = match scope {
        StandardizationScope::Joint => groups
            .values()
            .filter(|(m, w)| !m.is_empty() && !w.is_empty())
            .map(|(m, w)| m.iter().chain(w).copied().collect())
            .collect(),
        StandardizationScope::Global => {
            vec![groups.values().flat_map(|(m, w)| m.iter().chain(w)).copied().collect()]
        }
    };
    let table = z_table(scored, &scopes);
    let count = |cells: &[usize]| cells.iter().map(|&i| scored[i].scores.len()).sum();
    groups
        .iter()
        .map(|(&(action, ethnicity), (man, woman))| {
            let pbs_g = if man.is_empty() || woman.is_empty() {
                None
            } else {
                table.mean_of(man).zip(table.mean_of(woman)).map(|(m, w)| m - w)
            };
            GenderProbeCell {
                action,
                ethnicity,
                n_man: count(man),
                n_woman: count(woman),
                pbs_g,
                degenerate: table.any_degenerate(man) || table.any_degenerate(woman),
            }
        })
        .collect()
}

/// Per-action softmax distribution of standardized per-ethnicity means.
pub fn ethnicity_probe(scored: &[CellScores], scope: StandardizationScope) -> Vec<EthnicityProbeRow> {
    let mut groups: BTreeMap<Action, BTreeMap<Ethnicity, Vec<usize>>> = BTreeMap::new();
    for (i, c) in scored.iter().enumerate() {
        if let (None, Some(e)) = (c.cell.gender, c.cell.ethnicity) {
            groups.entry(c.cell.action).or_default().entry(e).or_default().push(i);
        }
    }
    let complete = |m: &BTreeMap<Ethnicity, Vec<usize>>| m.len() == Ethnicity::COUNT;
    let scopes: Vec<Vec<usize>> = match scope {
        StandardizationScope::Joint => groups
            .values()
            .filter(|m| complete(m))
            .map(|m| m.values().flatten().copied().collect())
            .collect(),
        StandardizationScope::Global => {
            vec![groups.values().flat_map(|m| m.values().flatten()).copied().collect()]
        }
    };
    let table = z_table(scored, &scopes);
    groups
        .iter()
        .map(|(&action, by_eth)| {
            let missing: Vec<Ethnicity> = Ethnicity::ALL
                .iter()
                .copied()
                .filter(|e| !by_eth.contains_key(e))
                .collect();
            let images = by_eth
                .values()
                .flatten()
                .map(|&i| scored[i].scores.len())
                .sum::<usize>();
            let all: Vec<usize> = by_eth.values().flatten().copied().collect();
            let means: Option<[f64; Ethnicity::COUNT]> = if missing.is_empty() {
                let mut m = [0.0; Ethnicity::COUNT];
                Ethnicity::ALL
                    .iter()
                    .try_for_each(|e| {
                        m[e.index()] = table.mean_of(&by_eth[e])?;
                        Some(())
                    })
                    .map(|_| m)
            } else {
                None
            };
            let pv = means.and_then(|m| ProportionVector::from_probabilities(softmax(&m), images as u64).ok());
            EthnicityProbeRow {
                action,
                images,
                means: means.map(|m| to_map(&m)),
                proportions: pv.map(|p| p.to_map()),
                rds: pv.and_then(|p| rds(&p).ok()).map(|r| to_map(&r)),
                sdi: pv.and_then(|p| sdi(&p).ok()),
                degenerate: table.any_degenerate(&all),
                missing,
            }
        })
        .collect()
}

/// Runs both probes over scored cells and computes the cross-action averages.
pub fn probe_report(scored: &[CellScores], scope: StandardizationScope, reward_id: &str) -> RewardBiasReport {
    let gender_cells = gender_probe(scored, scope);
    let ethnicity_rows = ethnicity_probe(scored, scope);

    let average_pbs_g = mean(gender_cells.iter().filter_map(|c| c.pbs_g));
    let pbs_g_by_ethnicity = if gender_cells.iter().any(|c| c.ethnicity.is_some()) {
        Ethnicity::ALL
            .iter()
            .map(|&e| {
                let m = mean(gender_cells.iter().filter(|c| c.ethnicity == Some(e)).filter_map(|c| c.pbs_g));
                (e, m)
            })
            .collect()
    } else {
        EthnicityMap::new()
    };
    let mut by_action: BTreeMap<Action, Vec<f64>> = BTreeMap::new();
    for c in &gender_cells {
        let entry = by_action.entry(c.action).or_default();
        entry.extend(c.pbs_g);
    }
    let pbs_g_by_action = by_action.into_iter().map(|(a, v)| (a, mean(v))).collect();

    let defined: Vec<&EthnicityMap<f64>> = ethnicity_rows.iter().filter_map(|r| r.rds.as_ref()).collect();
    let average_rds = (!defined.is_empty()).then(|| {
        Ethnicity::ALL
            .iter()
            .map(|e| (*e, mean(defined.iter().map(|r| r[e])).expect("non-empty")))
            .collect()
    });
    let average_sdi = mean(ethnicity_rows.iter().filter_map(|r| r.sdi));

    RewardBiasReport {
        reward_id: reward_id.to_string(),
        scope,
        gender_cells,
        average_pbs_g,
        pbs_g_by_ethnicity,
        pbs_g_by_action,
        ethnicity_rows,
        average_rds,
        average_sdi,
    }
}
