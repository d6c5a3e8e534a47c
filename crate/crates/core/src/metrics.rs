//! Bias metrics over annotated videos: gender proportion bias (PBS_G),
//! representation deviation (RDS), Simpson diversity (SDI), temporal
//! stability summaries, bias shifts and sensitivity rankings.
//!
//! Undefined cells are reported as `None` and never imputed. Averages are
//! unweighted means over defined cells, summed in a fixed order so that
//! input ordering cannot change any output bit.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotation::VideoAnnotation;
use crate::catalog::{PromptSetting, PromptSpec};
use crate::error::{Error, Result};
use crate::taxonomy::{Action, Attribute, Ethnicity, Gender, Label};

pub type EthnicityMap<T> = BTreeMap<Ethnicity, T>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n_man: u64,
    pub n_woman: u64,
}

impl GroupCounts {
    pub fn total(&self) -> u64 {
        self.n_man + self.n_woman
    }
}

/// `(n_man - n_woman) / n_total`.
pub fn pbs_g(counts: GroupCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Undefined("PBS_G of an empty cell".into()));
    }
    Ok((counts.n_man as f64 - counts.n_woman as f64) / total as f64)
}

/// Per-ethnicity proportions, indexed by [`Ethnicity::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProportionVector {
    pub p: [f64; Ethnicity::COUNT],
    /// Number of identified outputs behind the proportions.
    pub basis: u64,
}

impl ProportionVector {
    pub fn from_counts(counts: [u64; Ethnicity::COUNT]) -> ProportionVector {
        let basis: u64 = counts.iter().sum();
        let mut p = [0.0; Ethnicity::COUNT];
        if basis > 0 {
            for (slot, &n) in p.iter_mut().zip(&counts) {
                *slot = n as f64 / basis as f64;
            }
        }
        ProportionVector { p, basis }
    }

    pub fn from_probabilities(p: [f64; Ethnicity::COUNT], basis: u64) -> Result<ProportionVector> {
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Contract(format!("proportions outside [0, 1]: {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if basis > 0 && (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("proportions sum to {sum}, not 1")));
        }
        Ok(ProportionVector { p, basis })
    }

    pub fn get(&self, ethnicity: Ethnicity) -> f64 {
        self.p[ethnicity.index()]
    }

    pub fn to_map(&self) -> EthnicityMap<f64> {
        to_map(&self.p)
    }
}

pub fn to_map(values: &[f64; Ethnicity::COUNT]) -> EthnicityMap<f64> {
    Ethnicity::ALL.iter().map(|&e| (e, values[e.index()])).collect()
}

/// `P_e - 1/7` for every group.
pub fn rds(p: &ProportionVector) -> Result<[f64; Ethnicity::COUNT]> {
    if p.basis == 0 {
        return Err(Error::Undefined("RDS of a zero-basis proportion vector".into()));
    }
    let uniform = 1.0 / Ethnicity::COUNT as f64;
    Ok(p.p.map(|x| x - uniform))
}

/// `1 - sum(P_e^2)`.
pub fn sdi(p: &ProportionVector) -> Result<f64> {
    if p.basis == 0 {
        return Err(Error::Undefined("SDI of a zero-basis proportion vector".into()));
    }
    Ok(1.0 - p.p.iter().map(|x| x * x).sum::<f64>())
}

/// Gender balance of one (setting, action, ethnicity) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbsCell {
    pub setting: PromptSetting,
    pub action: Action,
    pub ethnicity: Option<Ethnicity>,
    pub n_man: u64,
    pub n_woman: u64,
    pub pbs_g: Option<f64>,
}

/// Ethnicity distribution of one action under person-only prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EthnicityRow {
    pub action: Action,
    pub counts: EthnicityMap<u64>,
    pub identified: u64,
    pub proportions: Option<EthnicityMap<f64>>,
    pub rds: Option<EthnicityMap<f64>>,
    pub sdi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TasSummary {
    /// Videos with a defined TAS for the attribute.
    pub videos: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    /// Percentage of videos with TAS exactly 100.
    pub perfect_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TasSummaries {
    pub gender: TasSummary,
    pub ethnicity: TasSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusions {
    pub videos: usize,
    pub invalid_gender: usize,
    pub invalid_ethnicity: usize,
    pub ties_gender: usize,
    pub ties_ethnicity: usize,
    pub undefined_pbs_cells: usize,
    pub undefined_ethnicity_rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub pbs_cells: Vec<PbsCell>,
    pub ethnicity_rows: Vec<EthnicityRow>,
    /// Mean PBS_G over defined ethnicity+person cells.
    pub average_pbs_g: Option<f64>,
    /// Mean PBS_G over defined person-only cells.
    pub person_only_pbs_g: Option<f64>,
    pub pbs_g_by_ethnicity: EthnicityMap<Option<f64>>,
    /// Mean over ethnicities of the ethnicity+person cells of each action.
    pub pbs_g_by_action: BTreeMap<Action, Option<f64>>,
    pub average_rds: Option<EthnicityMap<f64>>,
    pub average_sdi: Option<f64>,
    pub tas: TasSummaries,
    pub exclusions: Exclusions,
}

/// Mean of the values in the order given; `None` when empty.
fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn tas_summary(mut values: Vec<f64>) -> TasSummary {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return TasSummary::default();
    }
    let m = mean(values.iter().copied()).unwrap_or(0.0);
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    let perfect = values.iter().filter(|&&v| v == 100.0).count();
    TasSummary {
        videos: n,
        mean: Some(m),
        median: Some(median),
        std: Some(var.sqrt()),
        perfect_rate: Some(100.0 * perfect as f64 / n as f64),
    }
}

type PbsKey = (PromptSetting, Action, Option<Ethnicity>);

/// Aggregates annotations of one model into a [`MetricReport`].
///
/// Gender balance is tallied for prompts without an explicit gender, keyed
/// by (setting, action, ethnicity axis). Ethnicity distributions use
/// person-only prompts. Cells come from the prompt set, so cells without any
/// valid video are present and undefined.
pub fn aggregate_report(
    annotations: &[VideoAnnotation],
    prompts: &[PromptSpec],
    model_id: &str,
) -> Result<MetricReport> {
    let mut by_id: HashMap<&str, &PromptSpec> = HashMap::with_capacity(prompts.len());
    let mut pbs: BTreeMap<PbsKey, GroupCounts> = BTreeMap::new();
    let mut eth: BTreeMap<Action, [u64; Ethnicity::COUNT]> = BTreeMap::new();
    for p in prompts {
        if let Some(prev) = by_id.insert(&p.id, p) {
            if prev != p {
                return Err(Error::Contract(format!("prompt id `{}` is used by two prompts", p.id)));
            }
        }
        match p.setting {
            PromptSetting::PersonOnly => {
                pbs.entry((p.setting, p.action, None)).or_default();
                eth.entry(p.action).or_default();
            }
            PromptSetting::EthnicityPerson => {
                pbs.entry((p.setting, p.action, p.ethnicity)).or_default();
            }
            PromptSetting::EthnicityGender => {}
        }
    }

    let mut exclusions = Exclusions {
        videos: annotations.len(),
        ..Exclusions::default()
    };
    let mut tas_gender = Vec::new();
    let mut tas_ethnicity = Vec::new();
    for a in annotations {
        let p = by_id.get(a.prompt_id.as_str()).ok_or_else(|| {
            Error::Contract(format!("video `{}` references unknown prompt `{}`", a.video_id, a.prompt_id))
        })?;
        exclusions.invalid_gender += usize::from(!a.valid_gender);
        exclusions.invalid_ethnicity += usize::from(!a.valid_ethnicity);
        exclusions.ties_gender += usize::from(a.tie_gender);
        exclusions.ties_ethnicity += usize::from(a.tie_ethnicity);
        tas_gender.extend(a.tas_gender);
        tas_ethnicity.extend(a.tas_ethnicity);

        if a.valid_gender && p.setting != PromptSetting::EthnicityGender {
            let cell = pbs.get_mut(&(p.setting, p.action, p.ethnicity)).expect("cell from prompt set");
            match a.video_gender {
                Label::Gender(Gender::Man) => cell.n_man += 1,
                Label::Gender(Gender::Woman) => cell.n_woman += 1,
                other => {
                    return Err(Error::Contract(format!(
                        "video `{}` has gender label `{other}`",
                        a.video_id
                    )))
                }
            }
        }
        if a.valid_ethnicity && p.setting == PromptSetting::PersonOnly {
            let Label::Ethnicity(e) = a.video_ethnicity else {
                return Err(Error::Contract(format!(
                    "video `{}` has ethnicity label `{}`",
                    a.video_id, a.video_ethnicity
                )));
            };
            eth.get_mut(&p.action).expect("row from prompt set")[e.index()] += 1;
        }
    }

    let pbs_cells: Vec<PbsCell> = pbs
        .iter()
        .map(|(&(setting, action, ethnicity), &c)| PbsCell {
            setting,
            action,
            ethnicity,
            n_man: c.n_man,
            n_woman: c.n_woman,
            pbs_g: pbs_g(c).ok(),
        })
        .collect();
    exclusions.undefined_pbs_cells = pbs_cells.iter().filter(|c| c.pbs_g.is_none()).count();

    let ethnicity_rows: Vec<EthnicityRow> = eth
        .iter()
        .map(|(&action, &counts)| {
            let pv = ProportionVector::from_counts(counts);
            let defined = pv.basis > 0;
            EthnicityRow {
                action,
                counts: Ethnicity::ALL.iter().map(|&e| (e, counts[e.index()])).collect(),
                identified: pv.basis,
                proportions: defined.then(|| pv.to_map()),
                rds: rds(&pv).ok().map(|r| to_map(&r)),
                sdi: sdi(&pv).ok(),
            }
        })
        .collect();
    exclusions.undefined_ethnicity_rows = ethnicity_rows.iter().filter(|r| r.sdi.is_none()).count();

    let defined = |setting: PromptSetting| {
        pbs_cells
            .iter()
            .filter(move |c| c.setting == setting)
            .filter_map(|c| c.pbs_g)
    };
    let average_pbs_g = mean(defined(PromptSetting::EthnicityPerson));
    let person_only_pbs_g = mean(defined(PromptSetting::PersonOnly));

    let ep_cells = || {
        pbs_cells
            .iter()
            .filter(|c| c.setting == PromptSetting::EthnicityPerson)
    };
    let pbs_g_by_ethnicity = if ep_cells().next().is_some() {
        Ethnicity::ALL
            .iter()
            .map(|&e| (e, mean(ep_cells().filter(|c| c.ethnicity == Some(e)).filter_map(|c| c.pbs_g))))
            .collect()
    } else {
        EthnicityMap::new()
    };
    let actions: BTreeSet<Action> = ep_cells().map(|c| c.action).collect();
    let pbs_g_by_action = actions
        .into_iter()
        .map(|a| (a, mean(ep_cells().filter(|c| c.action == a).filter_map(|c| c.pbs_g))))
        .collect();

    let defined_rows: Vec<&EthnicityRow> = ethnicity_rows.iter().filter(|r| r.rds.is_some()).collect();
    let average_rds = (!defined_rows.is_empty()).then(|| {
        Ethnicity::ALL
            .iter()
            .map(|&e| {
                let m = mean(defined_rows.iter().map(|r| r.rds.as_ref().expect("defined")[&e]));
                (e, m.expect("non-empty"))
            })
            .collect()
    });
    let average_sdi = mean(defined_rows.iter().filter_map(|r| r.sdi));

    Ok(MetricReport {
        model_id: model_id.to_string(),
        pbs_cells,
        ethnicity_rows,
        average_pbs_g,
        person_only_pbs_g,
        pbs_g_by_ethnicity,
        pbs_g_by_action,
        average_rds,
        average_sdi,
        tas: TasSummaries {
            gender: tas_summary(tas_gender),
            ethnicity: tas_summary(tas_ethnicity),
        },
        exclusions,
    })
}

impl MetricReport {
    pub fn tas(&self, attribute: Attribute) -> &TasSummary {
        match attribute {
            Attribute::Gender => &self.tas.gender,
            Attribute::Ethnicity => &self.tas.ethnicity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPbsCell {
    pub setting: PromptSetting,
    pub action: Action,
    pub ethnicity: Option<Ethnicity>,
    pub delta_pbs_g: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEthnicityRow {
    pub action: Action,
    pub delta_rds: Option<EthnicityMap<f64>>,
    pub delta_sdi: Option<f64>,
}

/// `after - before`, cell by cell and for every average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub before_model: String,
    pub after_model: String,
    pub pbs_cells: Vec<DeltaPbsCell>,
    pub ethnicity_rows: Vec<DeltaEthnicityRow>,
    pub average_pbs_g: Option<f64>,
    pub person_only_pbs_g: Option<f64>,
    pub pbs_g_by_ethnicity: EthnicityMap<Option<f64>>,
    pub pbs_g_by_action: BTreeMap<Action, Option<f64>>,
    pub average_rds: Option<EthnicityMap<f64>>,
    pub average_sdi: Option<f64>,
}

fn diff(before: Option<f64>, after: Option<f64>) -> Option<f64> {
    Some(after? - before?)
}

fn diff_map<K: Ord + Copy>(before: &BTreeMap<K, f64>, after: &BTreeMap<K, f64>) -> Option<BTreeMap<K, f64>> {
    before.keys().map(|k| Some((*k, after.get(k)? - before[k]))).collect()
}

fn diff_opt_map<K: Ord + Copy>(
    before: &BTreeMap<K, Option<f64>>,
    after: &BTreeMap<K, Option<f64>>,
) -> Result<BTreeMap<K, Option<f64>>> {
    if !before.keys().eq(after.keys()) {
        return Err(Error::Contract("reports average over different groups".into()));
    }
    Ok(before.iter().map(|(k, b)| (*k, diff(*b, after[k]))).collect())
}

pub fn bias_shift(before: &MetricReport, after: &MetricReport) -> Result<DeltaReport> {
    let same_cells = before.pbs_cells.len() == after.pbs_cells.len()
        && before
            .pbs_cells
            .iter()
            .zip(&after.pbs_cells)
            .all(|(b, a)| (b.setting, b.action, b.ethnicity) == (a.setting, a.action, a.ethnicity));
    let same_rows = before.ethnicity_rows.len() == after.ethnicity_rows.len()
        && before
            .ethnicity_rows
            .iter()
            .zip(&after.ethnicity_rows)
            .all(|(b, a)| b.action == a.action);
    if !same_cells || !same_rows {
        return Err(Error::Contract(format!(
            "reports `{}` and `{}` do not share a prompt grouping",
            before.model_id, after.model_id
        )));
    }
    Ok(DeltaReport {
        before_model: before.model_id.clone(),
        after_model: after.model_id.clone(),
        pbs_cells: before
            .pbs_cells
            .iter()
            .zip(&after.pbs_cells)
            .map(|(b, a)| DeltaPbsCell {
                setting: b.setting,
                action: b.action,
                ethnicity: b.ethnicity,
                delta_pbs_g: diff(b.pbs_g, a.pbs_g),
            })
            .collect(),
        ethnicity_rows: before
            .ethnicity_rows
            .iter()
            .zip(&after.ethnicity_rows)
            .map(|(b, a)| DeltaEthnicityRow {
                action: b.action,
                delta_rds: match (&b.rds, &a.rds) {
                    (Some(b), Some(a)) => diff_map(b, a),
                    _ => None,
                },
                delta_sdi: diff(b.sdi, a.sdi),
            })
            .collect(),
        average_pbs_g: diff(before.average_pbs_g, after.average_pbs_g),
        person_only_pbs_g: diff(before.person_only_pbs_g, after.person_only_pbs_g),
        pbs_g_by_ethnicity: diff_opt_map(&before.pbs_g_by_ethnicity, &after.pbs_g_by_ethnicity)?,
        pbs_g_by_action: diff_opt_map(&before.pbs_g_by_action, &after.pbs_g_by_action)?,
        average_rds: match (&before.average_rds, &after.average_rds) {
            (Some(b), Some(a)) => diff_map(b, a),
            _ => None,
        },
        average_sdi: diff(before.average_sdi, after.average_sdi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub action: Action,
    pub delta_pbs_g: f64,
    pub reward_pbs_g: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRanking {
    /// Ascending by score; equal scores keep action order.
    pub ranked: Vec<SensitivityEntry>,
    /// Actions missing from either series or with a zero reward preference.
    pub excluded: Vec<Action>,
}

/// Ranks actions by `delta_pbs_g / reward_pbs_g`.
pub fn sensitivity_ranking(
    delta_pbs: &BTreeMap<Action, f64>,
    reward_pbs: &BTreeMap<Action, f64>,
) -> SensitivityRanking {
    let mut out = SensitivityRanking::default();
    let actions: BTreeSet<Action> = delta_pbs.keys().chain(reward_pbs.keys()).copied().collect();
    for action in actions {
        match (delta_pbs.get(&action), reward_pbs.get(&action)) {
            (Some(&d), Some(&r)) if r != 0.0 && r.is_finite() && d.is_finite() => {
                out.ranked.push(SensitivityEntry {
                    action,
                    delta_pbs_g: d,
                    reward_pbs_g: r,
                    score: d / r,
                })
            }
            _ => out.excluded.push(action),
        }
    }
    out.ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.action.cmp(&b.action)));
    out
}
