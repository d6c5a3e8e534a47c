use std::path::Path;
use std::sync::Arc;

use bias_audit::judge::{lexical_caption_attributes, parse_label, JudgeClient, JudgeConfig, Journal};
use bias_audit::preference_mining::{mine_attributes, MiningOptions, PreferenceRecord};
use bias_audit::taxonomy::{Action, Attribute, Ethnicity, Gender, Label};
use bias_audit::testkit::{write_image, MockOptions, MockServer};
use serde::Deserialize;
use serde_json::Value;

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn refusals_and_hedges_are_unidentifiable() {
    let text = fixture("refusals.txt");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 50);
    for line in lines {
        for attribute in [Attribute::Gender, Attribute::Ethnicity] {
            assert_eq!(parse_label(attribute, line), Label::Unidentifiable, "{attribute}: {line:?}");
        }
    }
}

#[test]
fn clean_replies_parse() {
    assert_eq!(parse_label(Attribute::Gender, " Woman. "), Label::Gender(Gender::Woman));
    assert_eq!(parse_label(Attribute::Gender, "MAN"), Label::Gender(Gender::Man));
    assert_eq!(parse_label(Attribute::Ethnicity, "middle-eastern"), Label::Ethnicity(Ethnicity::MiddleEastern));
    assert_eq!(parse_label(Attribute::Ethnicity, "Southeast Asian"), Label::Ethnicity(Ethnicity::SoutheastAsian));
    // A gender answer to an ethnicity question is not an ethnicity.
    assert_eq!(parse_label(Attribute::Ethnicity, "man"), Label::Unidentifiable);
}

#[derive(Deserialize)]
struct LabeledCaption {
    caption: String,
    gender: Option<Gender>,
    ethnicity: Option<String>,
    action: Option<String>,
}

#[test]
fn lexical_extraction_agrees_with_hand_labels() {
    let rows: Vec<LabeledCaption> = fixture("captions.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 100);
    let mut correct = 0;
    let mut misses = Vec::new();
    for row in &rows {
        let got = lexical_caption_attributes(&row.caption);
        let ethnicity = row.ethnicity.as_deref().map(|e| e.parse::<Ethnicity>().unwrap());
        let action = row.action.as_deref().map(|a| a.parse::<Action>().unwrap());
        if got.gender == row.gender && got.ethnicity == ethnicity && got.action == action {
            correct += 1;
        } else {
            misses.push(row.caption.as_str());
        }
    }
    let accuracy = correct as f64 / rows.len() as f64;
    assert!(accuracy >= 0.95, "accuracy {accuracy:.2}; misses: {misses:#?}");
}

#[derive(Deserialize)]
struct MiningRow {
    record: PreferenceRecord,
    payloads: [Value; 2],
    truth: [(Gender, String); 2],
}

#[test]
fn mining_recovers_fixture_attributes() {
    let rows: Vec<MiningRow> = fixture("mining.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 200);
    let dir = tempfile::tempdir().unwrap();
    for row in &rows {
        for (path, payload) in row.record.images.iter().zip(&row.payloads) {
            write_image(dir.path(), path, payload).unwrap();
        }
    }
    let server = MockServer::judge(MockOptions::default());
    let journal = Arc::new(Journal::in_memory());
    let judges: Vec<JudgeClient> = ["judge-a", "judge-b", "judge-c"]
        .iter()
        .map(|m| {
            let mut c = JudgeConfig::chat(m, &server.url(), m);
            c.retry_backoff_ms = 1;
            JudgeClient::new(c, Arc::clone(&journal)).unwrap()
        })
        .collect();
    let caption = JudgeClient::new(JudgeConfig::lexical("captions"), Arc::clone(&journal)).unwrap();
    let records: Vec<PreferenceRecord> = rows.iter().map(|r| r.record.clone()).collect();
    let outcome = mine_attributes(&records, &caption, &judges, dir.path(), &MiningOptions::default());
    assert_eq!(outcome.pairs.len(), 200);
    assert_eq!(outcome.degraded, 0);

    let mut correct = 0;
    for (pair, row) in outcome.pairs.iter().zip(&rows) {
        assert_eq!(pair.record, row.record);
        let ok = (0..2).all(|i| {
            let (g, e) = &row.truth[i];
            pair.gender[i] == Some(*g) && pair.ethnicity[i] == Some(e.parse().unwrap())
        });
        correct += usize::from(ok);
    }
    let accuracy = correct as f64 / rows.len() as f64;
    assert!(accuracy >= 0.90, "mining accuracy {accuracy:.3}");
}
