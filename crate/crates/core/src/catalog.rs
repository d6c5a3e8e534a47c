//! Demographic event-prompt generation.
//!
//! Prompts follow the template `<A|An> [ethnicity] <actor> is <gerund> <context>.`
//! where the actor is `person` unless a gender axis is expanded. The context
//! clauses come from a versioned catalog (embedded by default, overridable
//! by path) holding an ordered list of clauses for each of the 42 actions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::fields_digest;
use crate::error::{Error, Result};
use crate::taxonomy::{Action, Ethnicity, Gender, DEMOGRAPHIC_WORDS};

const BUILTIN_CATALOG: &str = include_str!("../data/contexts.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    PersonOnly,
    EthnicityPerson,
    EthnicityGender,
}

impl PromptSetting {
    pub const ALL: [PromptSetting; 3] = [
        PromptSetting::PersonOnly,
        PromptSetting::EthnicityPerson,
        PromptSetting::EthnicityGender,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptSetting::PersonOnly => "person_only",
            PromptSetting::EthnicityPerson => "ethnicity_person",
            PromptSetting::EthnicityGender => "ethnicity_gender",
        }
    }

    pub fn has_ethnicity(self) -> bool {
        !matches!(self, PromptSetting::PersonOnly)
    }

    pub fn has_gender(self) -> bool {
        matches!(self, PromptSetting::EthnicityGender)
    }
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptSetting::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown prompt setting `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrigin {
    /// Clause taken from a reference example prompt.
    Reference,
    /// Clause written for this catalog.
    Authored,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextVariant {
    pub action: Action,
    /// 1-based position within the action's clause list.
    pub index: usize,
    pub text: String,
    pub origin: ContextOrigin,
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    version: String,
    actions: BTreeMap<String, Vec<ClauseEntry>>,
}

#[derive(Debug, Deserialize)]
struct ClauseEntry {
    text: String,
    #[serde(default = "default_origin")]
    origin: ContextOrigin,
}

fn default_origin() -> ContextOrigin {
    ContextOrigin::Authored
}

/// Validated context catalog.
#[derive(Debug, Clone)]
pub struct Catalog {
    version: String,
    contexts: BTreeMap<Action, Vec<ContextVariant>>,
    digest: String,
}

impl Catalog {
    pub fn builtin() -> Catalog {
        Catalog::from_json(BUILTIN_CATALOG).expect("embedded catalog is valid")
    }

    pub fn from_path(path: &Path) -> Result<Catalog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Catalog::from_json(&text)
    }

    /// Parses and validates a catalog document. Unknown actions and clauses
    /// containing demographic words are rejected; actions may be missing
    /// (that surfaces later as a catalog-incomplete error).
    pub fn from_json(text: &str) -> Result<Catalog> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidCatalog(e.to_string()))?;
        let mut contexts = BTreeMap::new();
        for (name, entries) in file.actions {
            let action = Action::from_name(&name)
                .ok_or_else(|| Error::InvalidCatalog(format!("unknown action `{name}`")))?;
            let mut variants = Vec::with_capacity(entries.len());
            for (i, entry) in entries.into_iter().enumerate() {
                if let Some(word) = demographic_word(&entry.text) {
                    return Err(Error::InvalidCatalog(format!(
                        "context {} of `{name}` mentions demographic word `{word}`",
                        i + 1
                    )));
                }
                let text = entry.text.trim().trim_end_matches('.').to_string();
                if text.is_empty() {
                    return Err(Error::InvalidCatalog(format!(
                        "context {} of `{name}` is empty",
                        i + 1
                    )));
                }
                variants.push(ContextVariant {
                    action,
                    index: i + 1,
                    text,
                    origin: entry.origin,
                });
            }
            contexts.insert(action, variants);
        }
        Ok(Catalog {
            version: file.version,
            contexts,
            digest: crate::digest::sha256_hex(text),
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn contexts(&self, action: Action) -> &[ContextVariant] {
        self.contexts.get(&action).map_or(&[], Vec::as_slice)
    }

    pub fn context(&self, action: Action, index: usize) -> Result<&ContextVariant> {
        let variants = self.contexts(action);
        index
            .checked_sub(1)
            .and_then(|i| variants.get(i))
            .ok_or_else(|| Error::CatalogIncomplete {
                action: action.name().to_string(),
                available: variants.len(),
                requested: index,
            })
    }
}

/// First taxonomy word found in `text`, compared case-insensitively on
/// whole words.
pub fn demographic_word(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .collect();
    DEMOGRAPHIC_WORDS.iter().copied().find(|dw| {
        words
            .iter()
            .any(|w| w == dw || w.split('-').any(|part| part == *dw))
    })
}

/// The axis tuple identifying one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptAxes {
    pub setting: PromptSetting,
    pub action: Action,
    pub ethnicity: Option<Ethnicity>,
    pub gender: Option<Gender>,
    /// 1-based context variant index.
    pub context: usize,
}

impl PromptAxes {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.setting {
            PromptSetting::PersonOnly => self.ethnicity.is_none() && self.gender.is_none(),
            PromptSetting::EthnicityPerson => self.ethnicity.is_some() && self.gender.is_none(),
            PromptSetting::EthnicityGender => self.ethnicity.is_some() && self.gender.is_some(),
        };
        if !ok {
            return Err(Error::Contract(format!(
                "axes (ethnicity={:?}, gender={:?}) are not valid for setting {}",
                self.ethnicity, self.gender, self.setting
            )));
        }
        if self.context == 0 {
            return Err(Error::Contract("context index is 1-based".into()));
        }
        Ok(())
    }

    /// Stable id: a digest of the axis tuple only.
    pub fn id(&self) -> String {
        let ethnicity = self.ethnicity.map_or("", Ethnicity::as_str);
        let gender = self.gender.map_or("", Gender::as_str);
        let context = self.context.to_string();
        let digest = fields_digest([
            self.setting.as_str(),
            self.action.name(),
            ethnicity,
            gender,
            context.as_str(),
        ]);
        digest[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub setting: PromptSetting,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<Ethnicity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    pub context: usize,
    pub text: String,
}

impl PromptSpec {
    pub fn axes(&self) -> PromptAxes {
        PromptAxes {
            setting: self.setting,
            action: self.action,
            ethnicity: self.ethnicity,
            gender: self.gender,
            context: self.context,
        }
    }
}

fn article_for(phrase: &str) -> &'static str {
    match phrase.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "An",
        _ => "A",
    }
}

pub fn render_prompt(catalog: &Catalog, axes: &PromptAxes) -> Result<String> {
    axes.validate()?;
    let context = catalog.context(axes.action, axes.context)?;
    let actor = axes.gender.map_or("person", Gender::as_str);
    let phrase = match axes.ethnicity {
        Some(e) => format!("{e} {actor}"),
        None => actor.to_string(),
    };
    Ok(format!(
        "{} {phrase} is {} {}.",
        article_for(&phrase),
        axes.action.gerund(),
        context.text
    ))
}

pub fn build_spec(catalog: &Catalog, axes: PromptAxes) -> Result<PromptSpec> {
    let text = render_prompt(catalog, &axes)?;
    Ok(PromptSpec {
        id: axes.id(),
        setting: axes.setting,
        action: axes.action,
        ethnicity: axes.ethnicity,
        gender: axes.gender,
        context: axes.context,
        text,
    })
}

/// Full cross product of the axes expanded by `setting`, ordered by action,
/// ethnicity, gender (in the order given) and context index.
pub fn generate_prompt_set(
    catalog: &Catalog,
    setting: PromptSetting,
    contexts_per_action: usize,
    genders: &[Gender],
) -> Result<Vec<PromptSpec>> {
    if contexts_per_action == 0 {
        return Err(Error::Contract("contexts_per_action must be at least 1".into()));
    }
    if setting.has_gender() {
        if genders.is_empty() {
            return Err(Error::Contract(format!("setting {setting} needs at least one gender")));
        }
        let mut seen = genders.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != genders.len() {
            return Err(Error::Contract("gender list contains duplicates".into()));
        }
    } else if !genders.is_empty() {
        return Err(Error::Contract(format!("setting {setting} has no gender axis")));
    }
    for action in Action::all() {
        let available = catalog.contexts(action).len();
        if available < contexts_per_action {
            return Err(Error::CatalogIncomplete {
                action: action.name().to_string(),
                available,
                requested: contexts_per_action,
            });
        }
    }

    let ethnicities: Vec<Option<Ethnicity>> = if setting.has_ethnicity() {
        Ethnicity::ALL.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let gender_axis: Vec<Option<Gender>> = if setting.has_gender() {
        genders.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };

    let mut out = Vec::with_capacity(
        Action::COUNT * ethnicities.len() * gender_axis.len() * contexts_per_action,
    );
    for action in Action::all() {
        for &ethnicity in &ethnicities {
            for &gender in &gender_axis {
                for context in 1..=contexts_per_action {
                    out.push(build_spec(
                        catalog,
                        PromptAxes {
                            setting,
                            action,
                            ethnicity,
                            gender,
                            context,
                        },
                    )?);
                }
            }
        }
    }
    Ok(out)
}
