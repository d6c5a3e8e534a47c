//! Reply parsing. Every function here is total over text input.

use serde_json::Value;

use crate::taxonomy::{Action, Attribute, Ethnicity, Gender, Label};

use super::{AttributeSource, CaptionAttributes};

fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps a judge reply onto the closed label set of `attribute`.
///
/// Matching is case-insensitive with punctuation removed, and the whole
/// normalized reply must equal one label. Anything else is `Unidentifiable`.
pub fn parse_label(attribute: Attribute, reply: &str) -> Label {
    let norm = normalize(reply);
    Label::closed_set(attribute)
        .iter()
        .copied()
        .find(|label| normalize(label.as_str()) == norm)
        .unwrap_or(Label::Unidentifiable)
}

/// Parses the structured JSON reply of a caption judge. Fields that are
/// missing, null, or outside the closed sets are left empty.
pub fn parse_caption_reply(reply: &str, source: AttributeSource) -> CaptionAttributes {
    let mut attrs = CaptionAttributes::empty(source);
    let (Some(start), Some(end)) = (reply.find('{'), reply.rfind('}')) else {
        return attrs;
    };
    if end < start {
        return attrs;
    }
    let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&reply[start..=end]) else {
        return attrs;
    };
    let field = |key: &str| map.get(key).and_then(Value::as_str).unwrap_or("");
    attrs.gender = parse_label(Attribute::Gender, field("gender")).gender();
    attrs.ethnicity = parse_label(Attribute::Ethnicity, field("ethnicity")).ethnicity();
    attrs.action = match_action_word(field("action"));
    attrs
}

/// Matches a single word (any inflection) to an action.
pub fn match_action_word(word: &str) -> Option<Action> {
    let norm = normalize(word);
    if norm.is_empty() || norm.contains(' ') {
        return None;
    }
    Action::all().find(|a| a.surface_forms().any(|f| f == norm))
}

const MAN_WORDS: &[&str] = &[
    "man", "men", "male", "gentleman", "gentlemen", "guy", "boy", "father", "husband",
    "businessman", "fisherman", "sportsman", "grandfather",
];
const WOMAN_WORDS: &[&str] = &[
    "woman", "women", "female", "lady", "ladies", "girl", "mother", "wife", "businesswoman",
    "fisherwoman", "sportswoman", "grandmother",
];
const PERSON_NOUNS: &[&str] = &[
    "person", "people", "chef", "cook", "baker", "student", "worker", "athlete", "child", "kid",
    "teenager", "couple", "family", "friend", "friends", "artist", "farmer", "runner", "cyclist",
    "driver", "fisher", "rider", "dancer", "individual", "model",
];
const DETERMINERS: &[&str] = &["a", "an", "the", "his", "her", "their", "my", "your", "its"];

fn ethnicity_at(tokens: &[&str], i: usize) -> Option<(Ethnicity, usize)> {
    let next = |k: usize| tokens.get(i + k).copied().unwrap_or("");
    match tokens[i] {
        "white" => Some((Ethnicity::White, 1)),
        "black" => Some((Ethnicity::Black, 1)),
        "indian" => Some((Ethnicity::Indian, 1)),
        "latino" | "latina" | "hispanic" => Some((Ethnicity::Latino, 1)),
        "east" if next(1) == "asian" => Some((Ethnicity::EastAsian, 2)),
        "southeast" if next(1) == "asian" => Some((Ethnicity::SoutheastAsian, 2)),
        "south" if next(1) == "east" && next(2) == "asian" => {
            Some((Ethnicity::SoutheastAsian, 3))
        }
        "middle" if next(1) == "eastern" => Some((Ethnicity::MiddleEastern, 2)),
        _ => None,
    }
}

fn is_person_word(token: &str) -> bool {
    MAN_WORDS.contains(&token) || WOMAN_WORDS.contains(&token) || PERSON_NOUNS.contains(&token)
}

/// Offline caption attribute extractor based on the closed word lists.
///
/// * gender: set only when the caption mentions exactly one gender;
/// * ethnicity: an ethnicity adjective counts only when a person noun follows
///   within two words ("a white dress" is not an ethnicity mention);
/// * action: inflected verb forms win over bare forms, and bare forms right
///   after a determiner ("a bike") rank last; earliest mention breaks ties.
pub fn lexical_caption_attributes(caption: &str) -> CaptionAttributes {
    let lower = caption.to_lowercase();
    let tokens: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();

    let has_man = tokens.iter().any(|t| MAN_WORDS.contains(t));
    let has_woman = tokens.iter().any(|t| WOMAN_WORDS.contains(t));
    let gender = match (has_man, has_woman) {
        (true, false) => Some(Gender::Man),
        (false, true) => Some(Gender::Woman),
        _ => None,
    };

    let mut ethnicities = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some((e, width)) = ethnicity_at(&tokens, i) {
            let window = &tokens[i + width..(i + width + 2).min(tokens.len())];
            if window.iter().any(|t| is_person_word(t)) {
                ethnicities.push(e);
            }
            i += width;
        } else {
            i += 1;
        }
    }
    ethnicities.sort_unstable();
    ethnicities.dedup();
    let ethnicity = match ethnicities.as_slice() {
        [only] => Some(*only),
        _ => None,
    };

    let mut best: Option<((u8, usize), Action)> = None;
    for (pos, token) in tokens.iter().enumerate() {
        for action in Action::all() {
            let mut forms = action.surface_forms();
            let bare = forms.next().unwrap_or_default();
            let tier = if *token == bare {
                let after_det = pos > 0 && DETERMINERS.contains(&tokens[pos - 1]);
                if after_det { 2 } else { 1 }
            } else if forms.any(|f| f == *token) {
                0
            } else {
                continue;
            };
            let key = (tier, pos);
            if best.is_none_or(|(k, _)| key < k) {
                best = Some((key, action));
            }
        }
    }

    CaptionAttributes {
        gender,
        ethnicity,
        action: best.map(|(_, a)| a),
        source: AttributeSource::CaptionLlm,
    }
}
