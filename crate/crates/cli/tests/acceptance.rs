//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use bias_audit::annotation::{compute_tas, video_label, FrameLabel, VideoAnnotation};
use bias_audit::catalog::{generate_prompt_set, Catalog, PromptSetting, PromptSpec};
use bias_audit::config::AuditConfig;
use bias_audit::curation::CurationManifest;
use bias_audit::judge::{JudgeConfig, RewardConfig};
use bias_audit::metrics::{aggregate_report, bias_shift, rds, sdi, MetricReport, ProportionVector};
use bias_audit::reward_probe::{
    probe_report, softmax, CellScores, ImageManifestCell, RewardBiasReport, StandardizationScope,
};
use bias_audit::taxonomy::{Action, Attribute, Ethnicity, Gender, Label};
use bias_audit::testkit::{write_image, MockOptions, MockServer};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run_cli(args: &[&str]) -> Result<Value, String> {
    let out = cli(args);
    if !out.status.success() {
        return Err(format!("bias-audit {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(out.stdout.trim_ascii()).map_err(|e| e.to_string())
}

// 1. Prompt counts.
fn prompt_counts() -> Check {
    let catalog = Catalog::builtin();
    let all_genders = [Gender::Man, Gender::Woman, Gender::Person, Gender::NonBinaryPerson];
    let start = Instant::now();
    let sets = [
        (PromptSetting::PersonOnly, 4, &[][..], 168),
        (PromptSetting::EthnicityPerson, 4, &[][..], 1176),
        (PromptSetting::EthnicityPerson, 1, &[][..], 294),
        (PromptSetting::EthnicityGender, 1, &all_genders[..], 1176),
    ];
    let mut got = Vec::new();
    for (setting, contexts, genders, expected) in sets {
        let n = generate_prompt_set(&catalog, setting, contexts, genders)
            .map_err(|e| e.to_string())?
            .len();
        ensure!(n == expected, "{setting} x{contexts}: {n} prompts, expected {expected}");
        got.push(n);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{got:?} in {elapsed:.1?}"))
}

// 2. Metric formulas against a brute-force count.
fn formula_oracle() -> Check {
    let catalog = Catalog::builtin();
    let mut prompts = generate_prompt_set(&catalog, PromptSetting::PersonOnly, 1, &[]).unwrap();
    prompts.extend(generate_prompt_set(&catalog, PromptSetting::EthnicityPerson, 1, &[]).unwrap());
    let by_id: HashMap<&str, &PromptSpec> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let start = Instant::now();
    let sets = 1000;
    let mut videos_checked = 0usize;
    for set in 0..sets {
        let n = rng.gen_range(20..200);
        let mut annotations = Vec::with_capacity(n);
        for i in 0..n {
            let prompt = &prompts[rng.gen_range(0..prompts.len())];
            let frames_g = random_frames(&mut rng, Attribute::Gender);
            let frames_e = random_frames(&mut rng, Attribute::Ethnicity);
            let g = video_label(&frames_g);
            let e = video_label(&frames_e);
            let tas_g = compute_tas(&frames_g, g.label).ok();
            let tas_e = compute_tas(&frames_e, e.label).ok();
            // TAS against a direct count of the frame labels.
            for (frames, label, tas) in [(&frames_g, g.label, tas_g), (&frames_e, e.label, tas_e)] {
                let identified = frames.iter().filter(|f| f.label != Label::Unidentifiable).count();
                let matching = frames.iter().filter(|f| f.label == label).count();
                let expected = (identified > 0).then(|| 100.0 * matching as f64 / identified as f64);
                match (tas, expected) {
                    (Some(a), Some(b)) => ensure!(close(a, b, 1e-12), "set {set}: TAS {a} vs {b}"),
                    (a, b) => ensure!(a.is_none() && b.is_none(), "set {set}: TAS {a:?} vs {b:?}"),
                }
            }
            annotations.push(VideoAnnotation {
                video_id: format!("v{i:04}"),
                prompt_id: prompt.id.clone(),
                seed: 0,
                gender_frames: frames_g,
                ethnicity_frames: frames_e,
                video_gender: g.label,
                video_ethnicity: e.label,
                tas_gender: tas_g,
                tas_ethnicity: tas_e,
                valid_gender: g.valid,
                valid_ethnicity: e.valid,
                tie_gender: g.tie,
                tie_ethnicity: e.tie,
                judge_failures: Vec::new(),
            });
        }
        let report = aggregate_report(&annotations, &prompts, "oracle").map_err(|e| e.to_string())?;
        videos_checked += n;

        let mut tally: HashMap<(PromptSetting, Action, Option<Ethnicity>), [u64; 2]> = HashMap::new();
        let mut eth: HashMap<Action, [u64; 7]> = HashMap::new();
        for a in &annotations {
            let p = by_id[a.prompt_id.as_str()];
            let t = tally.entry((p.setting, p.action, p.ethnicity)).or_default();
            match a.video_gender {
                Label::Gender(Gender::Man) => t[0] += 1,
                Label::Gender(Gender::Woman) => t[1] += 1,
                _ => {}
            }
            if let (PromptSetting::PersonOnly, Label::Ethnicity(e)) = (p.setting, a.video_ethnicity) {
                eth.entry(p.action).or_default()[e.index()] += 1;
            }
        }
        for c in &report.pbs_cells {
            let [m, w] = tally.get(&(c.setting, c.action, c.ethnicity)).copied().unwrap_or_default();
            ensure!((c.n_man, c.n_woman) == (m, w), "set {set}: counts differ for {:?}", c.action);
            if m + w > 0 {
                let expected = (m as f64 - w as f64) / (m + w) as f64;
                ensure!(close(c.pbs_g.unwrap(), expected, 1e-12), "set {set}: PBS differs");
            } else {
                ensure!(c.pbs_g.is_none(), "set {set}: empty cell has a PBS");
            }
        }
        for row in &report.ethnicity_rows {
            let counts = eth.get(&row.action).copied().unwrap_or_default();
            let total: u64 = counts.iter().sum();
            for e in Ethnicity::ALL {
                ensure!(row.counts[e] == counts[e.index()], "set {set}: ethnicity count differs");
            }
            if total == 0 {
                ensure!(row.rds.is_none() && row.sdi.is_none(), "set {set}: empty row defined");
                continue;
            }
            let mut simpson = 1.0;
            for e in Ethnicity::ALL {
                let p = counts[e.index()] as f64 / total as f64;
                simpson -= p * p;
                let got = row.rds.as_ref().unwrap()[e];
                ensure!(close(got, p - 1.0 / 7.0, 1e-12), "set {set}: RDS differs");
            }
            ensure!(close(row.sdi.unwrap(), simpson, 1e-12), "set {set}: SDI differs");
        }
        let tas: Vec<f64> = annotations.iter().filter_map(|a| a.tas_ethnicity).collect();
        if !tas.is_empty() {
            let perfect = tas.iter().filter(|&&t| t == 100.0).count();
            let rate = report.tas.ethnicity.perfect_rate.unwrap();
            ensure!(close(rate, 100.0 * perfect as f64 / tas.len() as f64, 1e-12), "set {set}: stability rate");
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{sets} sets, {videos_checked} videos, {elapsed:.1?}"))
}

fn random_frames(rng: &mut ChaCha8Rng, attribute: Attribute) -> Vec<FrameLabel> {
    let set = Label::closed_set(attribute);
    let n = rng.gen_range(1..=16);
    // Biased towards one label so majorities and ties both occur.
    let favourite = set[rng.gen_range(0..set.len())];
    (0..n)
        .map(|i| FrameLabel {
            frame_index: i,
            attribute,
            label: if rng.gen_bool(0.6) { favourite } else { set[rng.gen_range(0..set.len())] },
            verdicts: Vec::new(),
        })
        .collect()
}

// 3. Arithmetic anchored to reference values.
fn anchored_arithmetic() -> Check {
    let white = 0.911857;
    let rest = (1.0 - white) / 6.0;
    let mut p = [rest; 7];
    p[Ethnicity::White.index()] = white;
    let pv = ProportionVector::from_probabilities(p, 1000).map_err(|e| e.to_string())?;
    let r = rds(&pv).unwrap()[Ethnicity::White.index()];
    ensure!(close(r, 0.7690, 5e-4), "RDS_White = {r}");

    let uniform = ProportionVector::from_probabilities([1.0 / 7.0; 7], 7).unwrap();
    let s = sdi(&uniform).unwrap();
    ensure!(close(s, 0.857143, 1e-6) && close(s, 6.0 / 7.0, 1e-9), "SDI(uniform) = {s}");

    let before = MetricReport {
        model_id: "base".into(),
        average_pbs_g: Some(0.4815),
        ..MetricReport::default()
    };
    let after = MetricReport {
        model_id: "aligned".into(),
        average_pbs_g: Some(0.5295),
        ..before.clone()
    };
    let delta = bias_shift(&before, &after).map_err(|e| e.to_string())?.average_pbs_g.unwrap();
    ensure!(format!("{delta:+.4}") == "+0.0480" && close(delta, 0.0480, 1e-12), "delta = {delta}");
    Ok(format!("RDS_White {r:.4}, SDI {s:.6}, delta {delta:+.4}"))
}

// 4. Planted bias recovered end to end through the CLI.
fn planted_pipeline() -> Check {
    let start = Instant::now();
    let server = MockServer::judge(MockOptions { workers: 8, ..MockOptions::default() });
    let mut prompts = common::prompts(PromptSetting::PersonOnly, 1);
    prompts.extend(common::prompts(PromptSetting::EthnicityPerson, 1));
    let videos = planted_videos(&prompts);
    let dir = tempfile::tempdir().unwrap();
    let fx = write_video_fixture(dir.path(), &prompts, &videos, judge_configs(&server.url(), &JUDGES), 8);
    let config = path_str(&fx.config_path);
    run_cli(&["annotate", "--config", config])?;
    let metrics_path = dir.path().join("metrics.json");
    run_cli(&["metrics", "compute", "--config", config, "--model-id", "planted", "--out", path_str(&metrics_path)])?;
    let report: MetricReport = read_json(&metrics_path);

    // Expected values straight from the plan.
    let mut cells: BTreeMap<(PromptSetting, Action, Option<Ethnicity>), [u64; 2]> = BTreeMap::new();
    let mut rows: BTreeMap<Action, [u64; 7]> = BTreeMap::new();
    let mut tas = [Vec::new(), Vec::new()];
    for v in &videos {
        let p = &v.prompt;
        if let Some(Label::Gender(g)) = v.label(true) {
            cells.entry((p.setting, p.action, p.ethnicity)).or_default()[usize::from(g == Gender::Woman)] += 1;
        }
        if let (PromptSetting::PersonOnly, Some(Label::Ethnicity(e))) = (p.setting, v.label(false)) {
            rows.entry(p.action).or_default()[e.index()] += 1;
        }
        tas[0].extend(v.tas(true));
        tas[1].extend(v.tas(false));
    }
    for (key, [m, w]) in &cells {
        let cell = report
            .pbs_cells
            .iter()
            .find(|c| (c.setting, c.action, c.ethnicity) == *key)
            .ok_or("planted cell missing")?;
        ensure!((cell.n_man, cell.n_woman) == (*m, *w), "{key:?}: counts {:?}", (cell.n_man, cell.n_woman));
        let expected = (*m as f64 - *w as f64) / (m + w) as f64;
        ensure!(cell.pbs_g == Some(expected), "{key:?}: PBS {:?} vs {expected}", cell.pbs_g);
    }
    for (action, counts) in &rows {
        let row = report.ethnicity_rows.iter().find(|r| r.action == *action).ok_or("row missing")?;
        let total: u64 = counts.iter().sum();
        let simpson = 1.0 - counts.iter().map(|&c| (c as f64 / total as f64).powi(2)).sum::<f64>();
        ensure!(close(row.sdi.unwrap(), simpson, 1e-12), "{action}: SDI {:?} vs {simpson}", row.sdi);
        for e in Ethnicity::ALL {
            let expected = counts[e.index()] as f64 / total as f64 - 1.0 / 7.0;
            ensure!(close(row.rds.as_ref().unwrap()[e], expected, 1e-12), "{action}: RDS {e}");
        }
    }
    for (summary, values, name) in [(&report.tas.gender, &tas[0], "gender"), (&report.tas.ethnicity, &tas[1], "ethnicity")] {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let perfect = 100.0 * values.iter().filter(|&&t| t == 100.0).count() as f64 / values.len() as f64;
        ensure!(summary.videos == values.len(), "{name}: {} TAS videos", summary.videos);
        ensure!(close(summary.mean.unwrap(), mean, 1e-9), "{name}: mean TAS {:?} vs {mean}", summary.mean);
        ensure!(summary.perfect_rate == Some(perfect), "{name}: perfect {:?} vs {perfect}", summary.perfect_rate);
    }

    // Stability fixture: 17 of 30 videos perfectly stable on ethnicity.
    let stable_dir = tempfile::tempdir().unwrap();
    let stable: Vec<PlannedVideo> = videos.iter().filter(|v| v.video_id.starts_with("stability-")).cloned().collect();
    ensure!(stable.len() == 30, "{} stability videos", stable.len());
    let sfx = write_video_fixture(stable_dir.path(), &prompts, &stable, judge_configs(&server.url(), &JUDGES), 8);
    run_cli(&["annotate", "--config", path_str(&sfx.config_path)])?;
    let stable_metrics = stable_dir.path().join("metrics.json");
    run_cli(&[
        "metrics", "compute", "--config", path_str(&sfx.config_path), "--out", path_str(&stable_metrics),
    ])?;
    let stable_report: MetricReport = read_json(&stable_metrics);
    let rate = stable_report.tas.ethnicity.perfect_rate.ok_or("no stability rate")?;
    ensure!(rate == 100.0 * 17.0 / 30.0 && format!("{rate:.1}") == "56.7", "perfect stability {rate}");

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} videos, {} cells, avg PBS_G {:.4}, ethnicity stability {rate:.1}%, {} judge requests, {elapsed:.1?}",
        videos.len(),
        cells.len(),
        report.average_pbs_g.unwrap_or(f64::NAN),
        server.requests()
    ))
}

fn planted_videos(prompts: &[PromptSpec]) -> Vec<PlannedVideo> {
    let mut videos = Vec::new();
    // Gender cells: action i, ethnicity j holds (3i + 2j) mod 11 men out of 10.
    for (i, action) in ["cook", "run"].into_iter().enumerate() {
        for (j, &e) in Ethnicity::ALL.iter().enumerate() {
            let prompt = find_prompt(prompts, action, Some(e));
            let men = (3 * i + 2 * j) % 11;
            for s in 0..10 {
                let g = if s < men { Gender::Man } else { Gender::Woman };
                let other = if g == Gender::Man { Gender::Woman } else { Gender::Man };
                let frames = (0..8)
                    .map(|f| {
                        let mut frame = PlannedFrame::new(g, e);
                        match (s % 3, f) {
                            (0, 6 | 7) => frame.gender = Some(other),
                            (1, 7) => frame.gender = None,
                            (_, 0) => frame = frame.noisy(),
                            _ => {}
                        }
                        frame
                    })
                    .collect();
                videos.push(PlannedVideo {
                    video_id: format!("{action}-{j}-{s:02}"),
                    prompt: prompt.clone(),
                    frames,
                });
            }
        }
    }
    // Ethnicity rows and stability: 30 person-only videos, 17 stable.
    let plan = [9, 6, 4, 4, 3, 2, 2];
    let prompt = find_prompt(prompts, "cook", None);
    let mut k = 0;
    for (idx, &count) in plan.iter().enumerate() {
        let e = Ethnicity::ALL[idx];
        let other = Ethnicity::ALL[(idx + 1) % 7];
        for _ in 0..count {
            let stable = k % 30 < 17;
            let frames = (0..8)
                .map(|f| {
                    let mut frame = PlannedFrame::new(Gender::Woman, e);
                    if !stable && f >= 6 {
                        frame.ethnicity = Some(other);
                    }
                    if f == 3 {
                        frame = frame.noisy();
                    }
                    frame
                })
                .collect();
            videos.push(PlannedVideo {
                video_id: format!("stability-{k:02}"),
                prompt: prompt.clone(),
                frames,
            });
            k += 1;
        }
    }
    // A balanced row: two videos per ethnicity, one frame refused by every judge.
    let prompt = find_prompt(prompts, "paint", None);
    for (idx, &e) in Ethnicity::ALL.iter().enumerate() {
        for s in 0..2 {
            let frames = (0..8)
                .map(|f| {
                    let mut frame = PlannedFrame::new(Gender::Man, e);
                    if f == 5 {
                        frame.ethnicity = None;
                    }
                    frame
                })
                .collect();
            videos.push(PlannedVideo {
                video_id: format!("paint-{idx}-{s}"),
                prompt: prompt.clone(),
                frames,
            });
        }
    }
    videos
}

// 5. Reward probe closed form.
fn reward_closed_form() -> Check {
    let server = MockServer::reward(MockOptions { workers: 8, ..MockOptions::default() });
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let actions = ["cook", "run", "read"];
    let mut cells = Vec::new();
    for action in actions {
        for &e in Ethnicity::ALL {
            for (g, score) in [(Gender::Man, 1.0), (Gender::Woman, -1.0)] {
                let names: Vec<String> = (0..100)
                    .map(|i| format!("{action}/{}/{g}/{i:03}.png", e.index()))
                    .collect();
                for (i, name) in names.iter().enumerate() {
                    write_image(&images, name, &json!({"score": score, "i": i})).unwrap();
                }
                cells.push(ImageManifestCell {
                    action: action.parse().unwrap(),
                    ethnicity: Some(e),
                    gender: Some(g),
                    context: 1,
                    prompt: format!("A {e} {g} is {action}ing."),
                    images: names,
                    evaluation_prompt: None,
                });
            }
        }
    }
    // Ethnicity cells with equal means (alternating 0 and 1).
    for &e in Ethnicity::ALL {
        let names: Vec<String> = (0..10).map(|i| format!("eth/{}/{i}.png", e.index())).collect();
        for (i, name) in names.iter().enumerate() {
            write_image(&images, name, &json!({"score": (i % 2) as f64})).unwrap();
        }
        cells.push(ImageManifestCell {
            action: "cook".parse().unwrap(),
            ethnicity: Some(e),
            gender: None,
            context: 1,
            prompt: format!("A {e} person is cooking."),
            images: names,
            evaluation_prompt: None,
        });
    }
    let manifest = dir.path().join("images.jsonl");
    bias_audit::jsonl::write_all(&manifest, &cells).unwrap();
    let mut config = AuditConfig::default();
    config.paths.output = dir.path().join("out");
    config.paths.images_root = Some(images);
    config.paths.image_manifest = Some(manifest);
    let mut reward = RewardConfig::new("mock-reward", &server.url());
    reward.retry_backoff_ms = 1;
    reward.max_concurrent = 8;
    config.reward = Some(reward);
    let config_path = dir.path().join("audit.toml");
    std::fs::write(&config_path, config.to_toml().unwrap()).unwrap();
    run_cli(&["reward-probe", "--config", path_str(&config_path)])?;

    let out = dir.path().join("out/reward-probe");
    let report: RewardBiasReport = read_json(&out.join("reward_report.json"));
    ensure!(report.gender_cells.len() == actions.len() * 7, "{} gender cells", report.gender_cells.len());
    for c in &report.gender_cells {
        ensure!(c.n_man == 100 && c.n_woman == 100, "cell sizes {} / {}", c.n_man, c.n_woman);
        ensure!(c.pbs_g.is_some_and(|p| close(p, 2.0, 1e-12)), "{} {:?}: PBS {:?}", c.action, c.ethnicity, c.pbs_g);
    }
    let row = report.ethnicity_rows.first().ok_or("no ethnicity row")?;
    let proportions = row.proportions.as_ref().ok_or("undefined proportions")?;
    ensure!(proportions.values().all(|p| close(*p, 1.0 / 7.0, 1e-12)), "proportions {proportions:?}");

    // Shifting every score by a constant changes nothing.
    let scored: Vec<CellScores> = bias_audit::jsonl::read_all(&out.join("reward_scores.jsonl")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let offset = rng.gen_range(-1000.0..1000.0);
        let shifted: Vec<CellScores> = scored
            .iter()
            .map(|c| CellScores { scores: c.scores.iter().map(|s| s + offset).collect(), ..c.clone() })
            .collect();
        let r = probe_report(&shifted, StandardizationScope::Joint, "shifted");
        for (a, b) in r.gender_cells.iter().zip(&report.gender_cells) {
            ensure!(close(a.pbs_g.unwrap(), b.pbs_g.unwrap(), 1e-9), "offset {offset}: PBS moved");
        }
        let mut v = [0.0; 7];
        for x in v.iter_mut() {
            *x = rng.gen_range(-5.0..5.0);
        }
        let (a, b) = (softmax(&v), softmax(&v.map(|x| x + offset)));
        ensure!(a.iter().zip(&b).all(|(x, y)| close(*x, *y, 1e-12)), "softmax moved under {offset}");
    }
    Ok(format!("{} cells at PBS_G 2.0, uniform 1/7 proportions, 100 offsets invariant", report.gender_cells.len()))
}

fn peak_rss_kb(pid: u32) -> Option<u64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

// 6. Curation at full scale, streamed.
fn curation_scale() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cells = Vec::new();
    for action in Action::all() {
        for &e in Ethnicity::ALL {
            for g in [Gender::Man, Gender::Woman] {
                cells.push(ImageManifestCell {
                    action,
                    ethnicity: Some(e),
                    gender: Some(g),
                    context: 1,
                    prompt: format!("A {e} {g} is {}.", action.gerund()),
                    images: (0..100).map(|i| format!("{action}/{}/{g}/{i:03}.png", e.index())).collect(),
                    evaluation_prompt: None,
                });
            }
        }
    }
    let manifest = dir.path().join("images.jsonl");
    bias_audit::jsonl::write_all(&manifest, &cells).unwrap();
    let facefree = dir.path().join("facefree.jsonl");
    {
        let mut w = BufWriter::new(std::fs::File::create(&facefree).unwrap());
        for i in 0..537_660u32 {
            let label = if i % 2 == 0 { "[1,0]" } else { "[0,1]" };
            writeln!(
                w,
                r#"{{"prompt":"A landscape scene number {i}.","image_a":"ff/{i}-a.png","image_b":"ff/{i}-b.png","label":{label}}}"#
            )
            .unwrap();
        }
    }
    let out_dir = dir.path().join("pairs");
    let mut child = Command::new(bin())
        .args(["curate", "--manifest", path_str(&manifest), "--facefree", path_str(&facefree), "--out", path_str(&out_dir)])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut peak = 0;
    let status = loop {
        if let Some(kb) = peak_rss_kb(child.id()) {
            peak = peak.max(kb);
        }
        if let Some(status) = child.try_wait().unwrap() {
            break status;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    ensure!(status.success(), "curate failed: {status}");
    let m: CurationManifest = read_json(&out_dir.join("manifest.json"));
    ensure!(m.curated_pairs == 2_940_000, "curated {}", m.curated_pairs);
    ensure!(m.facefree.as_ref().map(|f| f.accepted) == Some(537_660), "face-free {:?}", m.facefree);
    ensure!(m.total_records == 3_477_660, "total {}", m.total_records);
    let mut lines = 0u64;
    for shard in &m.shards {
        let f = std::fs::File::open(out_dir.join(&shard.file)).unwrap();
        let n = BufReader::new(f).lines().count() as u64;
        ensure!(n == shard.records, "{}: {n} lines vs {}", shard.file, shard.records);
        lines += n;
    }
    ensure!(lines == 3_477_660, "{lines} lines on disk");
    let peak_mb = peak as f64 / 1024.0;
    ensure!(peak > 0 && peak_mb < 512.0, "peak memory {peak_mb:.1} MB");
    Ok(format!(
        "2,940,000 curated + 537,660 face-free = {lines} records in {} shards, peak {peak_mb:.1} MB, {:.1?}",
        m.shards.len(),
        start.elapsed()
    ))
}

// 7. Preference mining fixtures.
fn mining_fixtures() -> Check {
    let server = MockServer::judge(MockOptions::default());
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let mut records = Vec::new();
    let actions: Vec<Action> = Action::all().collect();
    // 26 actions with six man-versus-woman pairs: 18 lean man, 8 lean woman.
    // Two more actions have too few pairs to count.
    for (k, action) in actions.iter().take(28).enumerate() {
        let (pairs, man_wins) = match k {
            0..18 => (6, 4),
            18..26 => (6, 1),
            _ => (3, 3),
        };
        for i in 0..pairs {
            let a = format!("g/{k}-{i}-a.png");
            let b = format!("g/{k}-{i}-b.png");
            let man_first = i % 2 == 0;
            let (ga, gb) = if man_first { ("man", "woman") } else { ("woman", "man") };
            write_image(&images, &a, &json!({"gender": ga, "ethnicity": "Latino"})).unwrap();
            write_image(&images, &b, &json!({"gender": gb, "ethnicity": "White"})).unwrap();
            let man_slot = if man_first { 0 } else { 1 };
            let preferred = if i < man_wins { man_slot } else { 1 - man_slot };
            records.push(json!({
                "caption": format!("A person is {} near the window.", action.gerund()),
                "images": [a, b],
                "preferred": preferred,
            }));
        }
    }
    let split = run_mining(dir.path(), "split", &records, judge_configs(&server.url(), &JUDGES), &images)?;
    let g = &split["gender"]["summary"];
    ensure!(g["actions"] == 26 && g["man_preferred"] == 18, "summary {g}");
    let pct = g["man_preferred_pct"].as_f64().unwrap_or(f64::NAN);
    ensure!(format!("{pct:.2}") == "69.23", "man-preferred {pct}");

    // Preferred-image ethnicity distribution of a 10,000-record corpus.
    let plan = [
        (Ethnicity::White, 4334),
        (Ethnicity::Black, 916),
        (Ethnicity::Latino, 444),
        (Ethnicity::EastAsian, 1938),
        (Ethnicity::SoutheastAsian, 139),
        (Ethnicity::Indian, 2020),
        (Ethnicity::MiddleEastern, 209),
    ];
    let mut records = Vec::new();
    for (e, n) in plan {
        for i in 0..n {
            let article = if matches!(e, Ethnicity::EastAsian | Ethnicity::Indian) { "An" } else { "A" };
            records.push(json!({
                "caption": format!("{article} {e} woman is walking through the city at dusk."),
                "images": [format!("d/{e}/{i}-a.png"), format!("d/{e}/{i}-b.png")],
                "preferred": i % 2,
            }));
        }
    }
    let dist = run_mining(dir.path(), "distribution", &records, Vec::new(), &images)?;
    let pcts = &dist["ethnicity"]["percentages"];
    let white = pcts["White"].as_f64().unwrap_or(f64::NAN);
    ensure!(close(white, 43.34, 0.01), "White {white}");
    for (e, n) in plan {
        let got = pcts[e.as_str()].as_f64().unwrap_or(f64::NAN);
        ensure!(close(got, n as f64 / 100.0, 1e-9), "{e}: {got}");
    }
    Ok(format!("man-preferred 18/26 = {pct:.2}%, White {white:.2}% of 10,000"))
}

fn run_mining(root: &Path, name: &str, records: &[Value], judges: Vec<JudgeConfig>, images: &Path) -> Result<Value, String> {
    let dir = root.join(name);
    let prefs = dir.join("preferences.jsonl");
    bias_audit::jsonl::write_all(&prefs, records).unwrap();
    let mut config = AuditConfig::default();
    config.paths.output = dir.join("out");
    config.paths.preferences = Some(prefs);
    config.paths.preference_images_root = Some(images.to_path_buf());
    config.judges = judges;
    let config_path = dir.join("audit.toml");
    std::fs::write(&config_path, config.to_toml().unwrap()).unwrap();
    run_cli(&["mine", "--config", path_str(&config_path)])?;
    Ok(read_json(&dir.join("out/mine/preference_summary.json")))
}

// 8. Determinism and resume.
fn determinism_and_resume() -> Check {
    let mut prompts = common::prompts(PromptSetting::EthnicityPerson, 1);
    prompts.extend(common::prompts(PromptSetting::PersonOnly, 1));
    let videos: Vec<PlannedVideo> = planted_videos(&prompts).into_iter().step_by(4).collect();

    // Control run, uninterrupted.
    let control_server = MockServer::judge(MockOptions::default());
    let control_dir = tempfile::tempdir().unwrap();
    let control = write_video_fixture(control_dir.path(), &prompts, &videos, judge_configs(&control_server.url(), &JUDGES), 8);
    run_cli(&["annotate", "--config", path_str(&control.config_path)])?;
    let control_requests = control_server.requests();
    let expected = std::fs::read(control_dir.path().join("out/annotate/annotations.jsonl")).unwrap();

    // Killed mid-run, then resumed.
    let slow = MockServer::judge(MockOptions { delay_ms: 3, ..MockOptions::default() });
    let kill_dir = tempfile::tempdir().unwrap();
    let fx = write_video_fixture(kill_dir.path(), &prompts, &videos, judge_configs(&slow.url(), &JUDGES), 8);
    let journal = fx.config.cache_path();
    let mut child = Command::new(bin())
        .args(["annotate", "--config", path_str(&fx.config_path)])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let target = control_requests / 3;
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let lines = std::fs::read_to_string(&journal).map(|t| t.lines().count()).unwrap_or(0);
        if lines >= target {
            break;
        }
        if child.try_wait().unwrap().is_some() || Instant::now() > deadline {
            return Err("annotate finished before it could be interrupted".into());
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let before_resume = slow.requests();
    let interrupted: Value = read_json(&kill_dir.path().join("out/annotate/run.json"));
    ensure!(interrupted["complete"] == false, "run marked complete after kill");
    let resumed = run_cli(&["resume", "--config", path_str(&fx.config_path)])?;
    ensure!(resumed["run_id"] == interrupted["run_id"], "resume changed the run id");
    let got = std::fs::read(kill_dir.path().join("out/annotate/annotations.jsonl")).unwrap();
    ensure!(got == expected, "resumed annotations differ from the control run");
    let resumed_requests = slow.requests() - before_resume;
    ensure!(
        resumed_requests < control_requests,
        "resume re-sent {resumed_requests} of {control_requests} requests"
    );

    // Service failure after N requests, healed, then resumed.
    let flaky = MockServer::judge(MockOptions { fail_after: Some(control_requests / 2), ..MockOptions::default() });
    let fail_dir = tempfile::tempdir().unwrap();
    let ffx = write_video_fixture(fail_dir.path(), &prompts, &videos, judge_configs(&flaky.url(), &JUDGES), 8);
    let out = cli(&["annotate", "--config", path_str(&ffx.config_path)]);
    ensure!(out.status.code() == Some(3), "failing service exit {:?}", out.status.code());
    flaky.set_fail_after(None);
    run_cli(&["resume", "--config", path_str(&ffx.config_path)])?;
    let got = std::fs::read(fail_dir.path().join("out/annotate/annotations.jsonl")).unwrap();
    ensure!(got == expected, "annotations after failure and resume differ");

    // Judge order permuted.
    let perm_server = MockServer::judge(MockOptions::default());
    let perm_dir = tempfile::tempdir().unwrap();
    let reversed = ["judge-c", "judge-a", "judge-b"];
    let pfx = write_video_fixture(perm_dir.path(), &prompts, &videos, judge_configs(&perm_server.url(), &reversed), 8);
    run_cli(&["annotate", "--config", path_str(&pfx.config_path)])?;
    let got = std::fs::read(perm_dir.path().join("out/annotate/annotations.jsonl")).unwrap();
    ensure!(got == expected, "judge order changed the annotations");

    Ok(format!(
        "{} videos; killed after {before_resume} requests, resume sent {resumed_requests} (control {control_requests}); byte-identical after kill, failure and judge permutation",
        videos.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "prompt counts", prompt_counts),
        (2, "metric formula oracle", formula_oracle),
        (3, "anchored arithmetic", anchored_arithmetic),
        (4, "planted bias end to end", planted_pipeline),
        (5, "reward probe closed form", reward_closed_form),
        (6, "curation scale", curation_scale),
        (7, "mining fixtures", mining_fixtures),
        (8, "determinism and resume", determinism_and_resume),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
