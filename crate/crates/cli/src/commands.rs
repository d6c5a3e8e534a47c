//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use bias_audit::annotation::{annotate_videos, AnnotateOptions, VideoAnnotation, VideoManifestEntry};
use bias_audit::catalog::{generate_prompt_set, Catalog, PromptSetting, PromptSpec};
use bias_audit::config::{AuditConfig, DEFAULT_CONTEXTS_PER_ACTION};
use bias_audit::curation::{curate, CurationConfig};
use bias_audit::judge::{validate_judges, JudgeClient, JudgeConfig, Journal, RewardClient};
use bias_audit::metrics::{aggregate_report, bias_shift, DeltaReport, MetricReport};
use bias_audit::preference_mining::{
    ethnicity_preference_distribution, gender_preference_per_action, mine_attributes, MiningOptions,
    PreferenceRecord,
};
use bias_audit::reward_probe::{probe_report, score_cells, ImageManifestCell};
use bias_audit::run::{file_digest, RunManifest, RUN_MANIFEST_FILE};
use bias_audit::taxonomy::Gender;
use bias_audit::{jsonl, Error};

use crate::report;
use crate::{
    AnnotateArgs, Cli, Command, ComputeArgs, CurateArgs, GenerateArgs, MetricsCommand, MineArgs,
    PromptsCommand, ResumeArgs, RewardProbeArgs, ShiftArgs,
};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const REWARD_SCORES_FILE: &str = "reward_scores.jsonl";
pub const REWARD_REPORT_FILE: &str = "reward_report.json";
pub const MINED_PAIRS_FILE: &str = "mined_pairs.jsonl";
pub const PREFERENCE_SUMMARY_FILE: &str = "preference_summary.json";

const RESUMABLE: [&str; 4] = ["annotate", "reward-probe", "mine", "curate"];

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Prompts(PromptsCommand::Generate(args)) => prompts_generate(config, args),
        Command::Annotate(args) => annotate(&load_config(config)?, &args),
        Command::Resume(args) => resume(&load_config(config)?, &args),
        Command::Metrics(MetricsCommand::Compute(args)) => metrics_compute(config, args),
        Command::Shift(args) => shift(args),
        Command::RewardProbe(args) => reward_probe(&load_config(config)?, &args),
        Command::Mine(args) => mine(&load_config(config)?, &args),
        Command::Curate(args) => curate_pairs(config, &args),
        Command::Report(args) => report::emit(&args),
    }
}

fn load_config(path: Option<&Path>) -> Result<AuditConfig> {
    let path = path.ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    Ok(AuditConfig::from_path(path)?)
}

fn optional_config(path: Option<&Path>) -> Result<Option<AuditConfig>> {
    path.map(|p| AuditConfig::from_path(p).map_err(Into::into)).transpose()
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")).into())
}

fn catalog(config: Option<&AuditConfig>, override_path: Option<&Path>) -> Result<Catalog> {
    let path = override_path.or_else(|| config.and_then(|c| c.paths.catalog.as_deref()));
    Ok(match path {
        Some(p) => Catalog::from_path(p)?,
        None => Catalog::builtin(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

/// Writes through a temporary sibling so a crash never leaves a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    jsonl::write_to(&mut buf, records)?;
    write_atomic(path, &buf)
}

/// Directory holding the artifacts and run manifest of one command.
pub fn stage_dir(config: &AuditConfig, command: &str) -> PathBuf {
    config.paths.output.join(command)
}

fn open_journal(config: &AuditConfig) -> Result<Arc<Journal>> {
    let path = config.cache_path();
    let journal = Journal::open(&path)?;
    if journal.skipped_lines() > 0 {
        log::warn!(
            "{}: ignored {} unreadable journal lines",
            path.display(),
            journal.skipped_lines()
        );
    }
    log::info!("{}: {} cached replies", path.display(), journal.len());
    Ok(Arc::new(journal))
}

fn judge_clients(configs: &[JudgeConfig], journal: &Arc<Journal>) -> Result<Vec<JudgeClient>> {
    Ok(configs
        .iter()
        .map(|c| JudgeClient::new(c.clone(), Arc::clone(journal)))
        .collect::<bias_audit::Result<_>>()?)
}

fn inputs(named: &[(&str, Option<&Path>)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, path) in named {
        if let Some(p) = path {
            out.insert(name.to_string(), file_digest(p)?);
        }
    }
    Ok(out)
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn prompts_generate(config_path: Option<&Path>, args: GenerateArgs) -> Result<()> {
    let config = optional_config(config_path)?;
    let catalog = catalog(config.as_ref(), args.catalog.as_deref())?;
    let contexts = args
        .contexts
        .or(config.as_ref().map(|c| c.axes.contexts_per_action))
        .unwrap_or(DEFAULT_CONTEXTS_PER_ACTION);
    let genders: Vec<Gender> = match (args.setting, args.genders.is_empty()) {
        (PromptSetting::EthnicityGender, true) => config
            .as_ref()
            .map_or_else(|| vec![Gender::Man, Gender::Woman], |c| c.axes.genders.clone()),
        _ => args.genders,
    };
    let prompts = generate_prompt_set(&catalog, args.setting, contexts, &genders)?;
    match &args.out {
        Some(path) => {
            write_jsonl(path, &prompts)?;
            log::info!("wrote {} prompts to {}", prompts.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            jsonl::write_to(&mut lock, &prompts)?;
        }
    }
    Ok(())
}

fn annotate(config: &AuditConfig, args: &AnnotateArgs) -> Result<()> {
    let frames_root = require(&config.paths.frames_root, "paths.frames_root")?;
    let manifest = require(&config.paths.video_manifest, "paths.video_manifest")?;
    validate_judges(&config.judges)?;
    let entries: Vec<VideoManifestEntry> = jsonl::read_all(manifest)?;
    let dir = stage_dir(config, "annotate");
    let catalog = catalog(Some(config), None)?;
    let mut run = RunManifest::start(
        "annotate",
        config,
        inputs(&[("video_manifest", Some(manifest))])?,
        catalog.version(),
    );
    run.begin(&dir)?;

    let journal = open_journal(config)?;
    let judges = judge_clients(&config.judges, &journal)?;
    let options = AnnotateOptions {
        frames_per_video: config.axes.frames_per_video,
        fusion: args.fusion.unwrap_or(config.modes.fusion),
    };
    let annotations: Vec<VideoAnnotation> = annotate_videos(&entries, frames_root, &judges, &options)?;

    let out = dir.join(ANNOTATIONS_FILE);
    write_jsonl(&out, &annotations)?;
    run.add_artifact(&dir, &out)?;
    run.finish(&dir)?;
    let failures: usize = annotations.iter().map(|a| a.judge_failures.len()).sum();
    print_summary(json!({
        "command": "annotate",
        "run_id": run.run_id,
        "videos": annotations.len(),
        "judge_failures": failures,
        "annotations": out,
    }));
    Ok(())
}

/// Replays an interrupted (or finished) command; every cached reply is
/// reused and only missing calls reach the services.
fn resume(config: &AuditConfig, args: &ResumeArgs) -> Result<()> {
    let mut candidates = Vec::new();
    for command in RESUMABLE {
        let dir = stage_dir(config, command);
        if dir.join(RUN_MANIFEST_FILE).exists() {
            candidates.push((command, RunManifest::load(&dir)?));
        }
    }
    let chosen = match &args.run_id {
        Some(id) => candidates
            .into_iter()
            .find(|(_, m)| &m.run_id == id)
            .ok_or_else(|| Error::Input(format!("no run `{id}` under {}", config.paths.output.display())))?,
        None => {
            let mut open: Vec<_> = candidates.into_iter().filter(|(_, m)| !m.complete).collect();
            match open.len() {
                0 => bail!(Error::Input(format!(
                    "no interrupted run under {}; pass --run-id to replay a finished one",
                    config.paths.output.display()
                ))),
                1 => open.remove(0),
                _ => bail!(Error::Input(
                    "several interrupted runs; pass --run-id to pick one".into()
                )),
            }
        }
    };
    let (command, previous) = chosen;
    if previous.config_digest != config.digest() {
        log::warn!("configuration changed since run {}; cached replies still apply by content", previous.run_id);
    }
    if !config.cache_path().exists() {
        log::warn!(
            "no journal at {}; resuming as a full run",
            config.cache_path().display()
        );
    }
    log::info!("resuming {command} run {}", previous.run_id);
    match command {
        "annotate" => annotate(config, &AnnotateArgs { fusion: None }),
        "reward-probe" => reward_probe(config, &RewardProbeArgs { scope: None }),
        "mine" => mine(
            config,
            &MineArgs {
                min_pairs: None,
                precedence: None,
            },
        ),
        "curate" => curate_pairs_with(config, &CurateArgs::default()),
        other => Err(anyhow!("command `{other}` cannot be resumed")),
    }
}

fn metrics_compute(config_path: Option<&Path>, args: ComputeArgs) -> Result<()> {
    let config = optional_config(config_path)?;
    let annotations_path = match (&args.annotations, &config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => stage_dir(c, "annotate").join(ANNOTATIONS_FILE),
        (None, None) => bail!(Error::Config("--annotations or --config is required".into())),
    };
    let prompts_path = match (&args.prompts, &config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => require(&c.paths.prompts, "paths.prompts")?.to_path_buf(),
        (None, None) => bail!(Error::Config("--prompts or --config is required".into())),
    };
    let annotations: Vec<VideoAnnotation> = jsonl::read_all(&annotations_path)?;
    let prompts: Vec<PromptSpec> = jsonl::read_all(&prompts_path)?;
    let report = aggregate_report(&annotations, &prompts, &args.model_id)?;
    let out = args
        .out
        .or_else(|| config.as_ref().map(|c| c.paths.output.join("metrics.json")));
    match out {
        Some(path) => {
            write_json(&path, &report)?;
            print_summary(json!({
                "command": "metrics compute",
                "model_id": report.model_id,
                "average_pbs_g": report.average_pbs_g,
                "report": path,
            }));
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn shift(args: ShiftArgs) -> Result<()> {
    let before: MetricReport = read_json(&args.before)?;
    let after: MetricReport = read_json(&args.after)?;
    let delta: DeltaReport = bias_shift(&before, &after)?;
    if let Some(path) = &args.csv {
        report::write_delta_csv(path, &delta)?;
    }
    match &args.out {
        Some(path) => write_json(path, &delta)?,
        None => println!("{}", serde_json::to_string_pretty(&delta)?),
    }
    Ok(())
}

fn reward_probe(config: &AuditConfig, args: &RewardProbeArgs) -> Result<()> {
    let reward = config
        .reward
        .clone()
        .ok_or_else(|| Error::Config("`[reward]` is not configured".into()))?;
    let manifest = require(&config.paths.image_manifest, "paths.image_manifest")?;
    let images_root = require(&config.paths.images_root, "paths.images_root")?;
    let cells: Vec<ImageManifestCell> = jsonl::read_all(manifest)?;
    let catalog = catalog(Some(config), None)?;
    let dir = stage_dir(config, "reward-probe");
    let mut run = RunManifest::start(
        "reward-probe",
        config,
        inputs(&[("image_manifest", Some(manifest))])?,
        catalog.version(),
    );
    run.begin(&dir)?;

    let journal = open_journal(config)?;
    let reward_id = reward.reward_id.clone();
    let client = RewardClient::new(reward, journal)?;
    let scored = score_cells(&cells, images_root, &catalog, &client)?;
    let scope = args.scope.unwrap_or(config.modes.standardization);
    let report = probe_report(&scored, scope, &reward_id);

    let scores_path = dir.join(REWARD_SCORES_FILE);
    let report_path = dir.join(REWARD_REPORT_FILE);
    write_jsonl(&scores_path, &scored)?;
    write_json(&report_path, &report)?;
    run.add_artifact(&dir, &scores_path)?;
    run.add_artifact(&dir, &report_path)?;
    run.finish(&dir)?;
    print_summary(json!({
        "command": "reward-probe",
        "run_id": run.run_id,
        "images": scored.iter().map(|c| c.scores.len()).sum::<usize>(),
        "average_pbs_g": report.average_pbs_g,
        "report": report_path,
    }));
    Ok(())
}

fn mine(config: &AuditConfig, args: &MineArgs) -> Result<()> {
    let preferences = require(&config.paths.preferences, "paths.preferences")?;
    let images_root = config
        .paths
        .preference_images_root
        .as_deref()
        .or(config.paths.images_root.as_deref())
        .ok_or_else(|| Error::Config("`paths.preference_images_root` is not set".into()))?;
    let records: Vec<PreferenceRecord> = jsonl::read_all(preferences)?;
    if !config.judges.is_empty() {
        validate_judges(&config.judges)?;
    }
    let catalog = catalog(Some(config), None)?;
    let dir = stage_dir(config, "mine");
    let mut run = RunManifest::start(
        "mine",
        config,
        inputs(&[("preferences", Some(preferences))])?,
        catalog.version(),
    );
    run.begin(&dir)?;

    let journal = open_journal(config)?;
    let caption_config = config
        .caption_judge
        .clone()
        .unwrap_or_else(|| JudgeConfig::lexical("caption-lexical"));
    let caption_judge = JudgeClient::new(caption_config, Arc::clone(&journal))?;
    let image_judges = judge_clients(&config.judges, &journal)?;
    let options = MiningOptions {
        precedence: args.precedence.unwrap_or(config.modes.precedence),
    };
    let outcome = mine_attributes(&records, &caption_judge, &image_judges, images_root, &options);
    let min_pairs = args.min_pairs.unwrap_or(config.modes.min_pairs);
    let gender = gender_preference_per_action(&outcome.pairs, min_pairs);
    let ethnicity = ethnicity_preference_distribution(&outcome.pairs);

    let pairs_path = dir.join(MINED_PAIRS_FILE);
    let summary_path = dir.join(PREFERENCE_SUMMARY_FILE);
    let by_action_path = dir.join("preference_by_action.csv");
    let ethnicity_path = dir.join("ethnicity_preference.csv");
    write_jsonl(&pairs_path, &outcome.pairs)?;
    write_json(
        &summary_path,
        &json!({
            "records": outcome.records,
            "invalid": outcome.invalid,
            "no_action": outcome.no_action,
            "degraded": outcome.degraded,
            "pairs": outcome.pairs.len(),
            "gender": gender,
            "ethnicity": ethnicity,
        }),
    )?;
    report::write_preference_csv(&by_action_path, &gender)?;
    report::write_ethnicity_preference_csv(&ethnicity_path, &ethnicity)?;
    for p in [&pairs_path, &summary_path, &by_action_path, &ethnicity_path] {
        run.add_artifact(&dir, p)?;
    }
    run.finish(&dir)?;
    print_summary(json!({
        "command": "mine",
        "run_id": run.run_id,
        "records": outcome.records,
        "pairs": outcome.pairs.len(),
        "degraded": outcome.degraded,
        "man_preferred_pct": gender.summary.man_preferred_pct,
        "summary": summary_path,
    }));
    Ok(())
}

fn curate_pairs(config_path: Option<&Path>, args: &CurateArgs) -> Result<()> {
    let config = optional_config(config_path)?.unwrap_or_default();
    curate_pairs_with(&config, args)
}

fn curate_pairs_with(config: &AuditConfig, args: &CurateArgs) -> Result<()> {
    let manifest = match &args.manifest {
        Some(p) => p.as_path(),
        None => require(&config.paths.image_manifest, "paths.image_manifest (or --manifest)")?,
    };
    let facefree = args.facefree.as_deref().or(config.paths.facefree.as_deref());
    let curation = CurationConfig {
        direction: args.direction.unwrap_or(config.curation.direction),
        images_per_gender: args.images_per_gender.or(config.curation.images_per_gender),
        shard_size: args.shard_size.unwrap_or(config.curation.shard_size),
    };
    if curation.shard_size == 0 {
        bail!(Error::Contract("shard_size must be at least 1".into()));
    }
    let dir = args.out.clone().unwrap_or_else(|| stage_dir(config, "curate"));
    let catalog = catalog(Some(config), None)?;
    let cells: Vec<ImageManifestCell> = jsonl::read_all(manifest)?;

    let mut effective = config.clone();
    effective.curation = curation.clone();
    let mut run = RunManifest::start(
        "curate",
        &effective,
        inputs(&[("image_manifest", Some(manifest)), ("facefree", facefree)])?,
        catalog.version(),
    );
    run.begin(&dir)?;
    let manifest = curate(&cells, &catalog, &curation, facefree, &dir)?;
    for shard in &manifest.shards {
        run.artifacts.push(bias_audit::run::Artifact {
            path: shard.file.clone(),
            sha256: shard.sha256.clone(),
        });
    }
    run.add_artifact(&dir, &dir.join(bias_audit::curation::MANIFEST_FILE))?;
    run.finish(&dir)?;
    print_summary(json!({
        "command": "curate",
        "run_id": run.run_id,
        "direction": manifest.direction,
        "curated_pairs": manifest.curated_pairs,
        "total_records": manifest.total_records,
        "shards": manifest.shards.len(),
        "out": dir,
    }));
    Ok(())
}
