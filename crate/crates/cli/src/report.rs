//! CSV emitters for result tables and plot data.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use bias_audit::metrics::{sensitivity_ranking, DeltaReport, EthnicityMap, MetricReport};
use bias_audit::preference_mining::{EthnicityDistribution, GenderPreference};
use bias_audit::reward_probe::RewardBiasReport;
use bias_audit::taxonomy::{Action, Ethnicity};

use crate::commands::read_json;
use crate::ReportArgs;

pub const BIAS_TABLE: &str = "bias_table.csv";
pub const REWARD_TABLE: &str = "reward_table.csv";
pub const TAS_TABLE: &str = "tas_table.csv";
pub const RADAR: &str = "radar.csv";
pub const SCATTER: &str = "scatter.csv";
pub const SENSITIVITY: &str = "sensitivity.csv";

/// Four-decimal rendering; undefined values are empty cells.
pub fn fmt4(value: Option<f64>) -> String {
    match value {
        Some(v) if v.is_finite() => {
            let s = format!("{v:.4}");
            if s == "-0.0000" {
                "0.0000".into()
            } else {
                s
            }
        }
        _ => String::new(),
    }
}

fn column(e: Ethnicity) -> String {
    e.as_str().to_lowercase().replace(' ', "_")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn bias_header(first: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    h.push("average_pbs_g".into());
    for e in Ethnicity::TABLE_ORDER {
        h.push(format!("pbs_g_{}", column(e)));
        h.push(format!("rds_{}", column(e)));
    }
    h.push("sdi".into());
    h
}

fn bias_row(
    mut row: Vec<String>,
    average_pbs_g: Option<f64>,
    pbs_by_ethnicity: &EthnicityMap<Option<f64>>,
    average_rds: Option<&EthnicityMap<f64>>,
    sdi: Option<f64>,
) -> Vec<String> {
    row.push(fmt4(average_pbs_g));
    for e in Ethnicity::TABLE_ORDER {
        row.push(fmt4(pbs_by_ethnicity.get(&e).copied().flatten()));
        row.push(fmt4(average_rds.and_then(|m| m.get(&e).copied())));
    }
    row.push(fmt4(sdi));
    row
}

pub fn write_bias_table(path: &Path, metrics: &[MetricReport], deltas: &[DeltaReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(bias_header(&["model", "kind"]))?;
    for m in metrics {
        w.write_record(bias_row(
            vec![m.model_id.clone(), "value".into()],
            m.average_pbs_g,
            &m.pbs_g_by_ethnicity,
            m.average_rds.as_ref(),
            m.average_sdi,
        ))?;
    }
    for d in deltas {
        w.write_record(bias_row(
            vec![format!("{} -> {}", d.before_model, d.after_model), "delta".into()],
            d.average_pbs_g,
            &d.pbs_g_by_ethnicity,
            d.average_rds.as_ref(),
            d.average_sdi,
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reward_table(path: &Path, rewards: &[RewardBiasReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(bias_header(&["reward_model", "scope"]))?;
    for r in rewards {
        let scope = serde_json::to_value(r.scope)?;
        w.write_record(bias_row(
            vec![r.reward_id.clone(), scope.as_str().unwrap_or_default().to_string()],
            r.average_pbs_g,
            &r.pbs_g_by_ethnicity,
            r.average_rds.as_ref(),
            r.average_sdi,
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tas_table(path: &Path, metrics: &[MetricReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "model",
        "attribute",
        "videos",
        "mean_tas",
        "median_tas",
        "std_tas",
        "perfect_stability",
    ])?;
    for m in metrics {
        for (attribute, s) in [("gender", &m.tas.gender), ("ethnicity", &m.tas.ethnicity)] {
            w.write_record([
                m.model_id.clone(),
                attribute.to_string(),
                s.videos.to_string(),
                fmt4(s.mean),
                fmt4(s.median),
                fmt4(s.std),
                fmt4(s.perfect_rate),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-form per-action series: one row per (series, metric, group, action).
pub fn write_radar(
    path: &Path,
    metrics: &[MetricReport],
    deltas: &[DeltaReport],
    rewards: &[RewardBiasReport],
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["series", "metric", "group", "action", "value"])?;
    let mut row = |series: &str, metric: &str, group: &str, action: Action, value: Option<f64>| {
        w.write_record([series, metric, group, action.name(), &fmt4(value)])
    };
    for m in metrics {
        for c in &m.pbs_cells {
            if let Some(e) = c.ethnicity {
                row(&m.model_id, "pbs_g", e.as_str(), c.action, c.pbs_g)?;
            }
        }
        for r in &m.ethnicity_rows {
            for e in Ethnicity::TABLE_ORDER {
                row(&m.model_id, "rds", e.as_str(), r.action, r.rds.as_ref().and_then(|x| x.get(&e).copied()))?;
            }
        }
    }
    for d in deltas {
        let series = format!("{} -> {}", d.before_model, d.after_model);
        for c in &d.pbs_cells {
            if let Some(e) = c.ethnicity {
                row(&series, "delta_pbs_g", e.as_str(), c.action, c.delta_pbs_g)?;
            }
        }
        for r in &d.ethnicity_rows {
            for e in Ethnicity::TABLE_ORDER {
                let v = r.delta_rds.as_ref().and_then(|x| x.get(&e).copied());
                row(&series, "delta_rds", e.as_str(), r.action, v)?;
            }
        }
    }
    for r in rewards {
        for c in &r.gender_cells {
            if let Some(e) = c.ethnicity {
                row(&r.reward_id, "pbs_g", e.as_str(), c.action, c.pbs_g)?;
            }
        }
        for er in &r.ethnicity_rows {
            for e in Ethnicity::TABLE_ORDER {
                row(&r.reward_id, "rds", e.as_str(), er.action, er.rds.as_ref().and_then(|x| x.get(&e).copied()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn defined(map: &BTreeMap<Action, Option<f64>>) -> BTreeMap<Action, f64> {
    map.iter().filter_map(|(a, v)| v.map(|v| (*a, v))).collect()
}

/// Per-action reward preference against the bias shift, and the resulting
/// sensitivity ranking.
pub fn write_scatter_and_sensitivity(
    dir: &Path,
    delta: &DeltaReport,
    reward: &RewardBiasReport,
) -> Result<()> {
    let delta_by_action = defined(&delta.pbs_g_by_action);
    let reward_by_action = defined(&reward.pbs_g_by_action);

    let mut w = writer(&dir.join(SCATTER))?;
    w.write_record(["action", "reward_pbs_g", "delta_pbs_g"])?;
    for (action, r) in &reward_by_action {
        if let Some(d) = delta_by_action.get(action) {
            w.write_record([action.name(), &fmt4(Some(*r)), &fmt4(Some(*d))])?;
        }
    }
    w.flush()?;

    let ranking = sensitivity_ranking(&delta_by_action, &reward_by_action);
    let mut w = writer(&dir.join(SENSITIVITY))?;
    w.write_record(["rank", "action", "delta_pbs_g", "reward_pbs_g", "sensitivity"])?;
    for (i, e) in ranking.ranked.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            e.action.name().to_string(),
            fmt4(Some(e.delta_pbs_g)),
            fmt4(Some(e.reward_pbs_g)),
            fmt4(Some(e.score)),
        ])?;
    }
    for action in &ranking.excluded {
        w.write_record(["", action.name(), "", "", ""])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_delta_csv(path: &Path, delta: &DeltaReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["setting", "action", "ethnicity", "delta_pbs_g"])?;
    for c in &delta.pbs_cells {
        w.write_record([
            c.setting.as_str(),
            c.action.name(),
            c.ethnicity.map_or("", Ethnicity::as_str),
            &fmt4(c.delta_pbs_g),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_preference_csv(path: &Path, preference: &GenderPreference) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["action", "wins_man", "wins_woman", "score"])?;
    for a in &preference.actions {
        w.write_record([
            a.action.name().to_string(),
            a.wins_man.to_string(),
            a.wins_woman.to_string(),
            fmt4(Some(a.score)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ethnicity_preference_csv(path: &Path, dist: &EthnicityDistribution) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["ethnicity", "count", "percentage"])?;
    for e in Ethnicity::TABLE_ORDER {
        let pct = dist.percentages.as_ref().and_then(|p| p.get(&e).copied());
        w.write_record([
            e.as_str().to_string(),
            dist.counts.get(&e).copied().unwrap_or(0).to_string(),
            fmt4(pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit(args: &ReportArgs) -> Result<()> {
    let metrics: Vec<MetricReport> = args.metrics.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let deltas: Vec<DeltaReport> = args.deltas.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let rewards: Vec<RewardBiasReport> = args.rewards.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let mut written = Vec::new();
    if !metrics.is_empty() || !deltas.is_empty() {
        write_bias_table(&args.out.join(BIAS_TABLE), &metrics, &deltas)?;
        written.push(BIAS_TABLE);
    }
    if !metrics.is_empty() {
        write_tas_table(&args.out.join(TAS_TABLE), &metrics)?;
        written.push(TAS_TABLE);
    }
    if !rewards.is_empty() {
        write_reward_table(&args.out.join(REWARD_TABLE), &rewards)?;
        written.push(REWARD_TABLE);
    }
    if !metrics.is_empty() || !deltas.is_empty() || !rewards.is_empty() {
        write_radar(&args.out.join(RADAR), &metrics, &deltas, &rewards)?;
        written.push(RADAR);
    }
    if let (Some(d), Some(r)) = (&args.scatter_delta, &args.scatter_reward) {
        let delta: DeltaReport = read_json(d)?;
        let reward: RewardBiasReport = read_json(r)?;
        write_scatter_and_sensitivity(&args.out, &delta, &reward)?;
        written.extend([SCATTER, SENSITIVITY]);
    }
    println!("{}", serde_json::json!({"command": "report", "out": args.out, "files": written}));
    Ok(())
}
