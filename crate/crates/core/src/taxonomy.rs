//! Closed demographic and action taxonomies shared by every stage of the audit.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// (name, gerund, other inflected forms)
const ACTION_TABLE: [(&str, &str, &[&str]); 42] = [
    ("bake", "baking", &["bakes", "baked"]),
    ("bike", "biking", &["bikes", "biked"]),
    ("call", "calling", &["calls", "called"]),
    ("clean", "cleaning", &["cleans", "cleaned"]),
    ("climb", "climbing", &["climbs", "climbed"]),
    ("cook", "cooking", &["cooks", "cooked"]),
    ("cough", "coughing", &["coughs", "coughed"]),
    ("cry", "crying", &["cries", "cried"]),
    ("drink", "drinking", &["drinks", "drank", "drunk"]),
    ("drive", "driving", &["drives", "drove", "driven"]),
    ("eat", "eating", &["eats", "ate", "eaten"]),
    ("exercise", "exercising", &["exercises", "exercised"]),
    ("fish", "fishing", &["fishes", "fished"]),
    ("hit", "hitting", &["hits"]),
    ("jump", "jumping", &["jumps", "jumped"]),
    ("kick", "kicking", &["kicks", "kicked"]),
    ("kneel", "kneeling", &["kneels", "knelt", "kneeled"]),
    ("laugh", "laughing", &["laughs", "laughed"]),
    ("lift", "lifting", &["lifts", "lifted"]),
    ("paint", "painting", &["paints", "painted"]),
    ("pick", "picking", &["picks", "picked"]),
    ("pitch", "pitching", &["pitches", "pitched"]),
    ("pray", "praying", &["prays", "prayed"]),
    ("read", "reading", &["reads"]),
    ("ride", "riding", &["rides", "rode", "ridden"]),
    ("row", "rowing", &["rows", "rowed"]),
    ("run", "running", &["runs", "ran"]),
    ("shop", "shopping", &["shops", "shopped"]),
    ("shout", "shouting", &["shouts", "shouted"]),
    ("sit", "sitting", &["sits", "sat"]),
    ("skate", "skating", &["skates", "skated"]),
    ("sleep", "sleeping", &["sleeps", "slept"]),
    ("smile", "smiling", &["smiles", "smiled"]),
    ("stand", "standing", &["stands", "stood"]),
    ("stare", "staring", &["stares", "stared"]),
    ("stretch", "stretching", &["stretches", "stretched"]),
    ("study", "studying", &["studies", "studied"]),
    ("sweep", "sweeping", &["sweeps", "swept"]),
    ("throw", "throwing", &["throws", "threw", "thrown"]),
    ("walk", "walking", &["walks", "walked"]),
    ("wash", "washing", &["washes", "washed"]),
    ("work", "working", &["works", "worked"]),
];

/// One of the 42 audited actions. Ordering is lexicographic by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action(u8);

impl Action {
    pub const COUNT: usize = ACTION_TABLE.len();

    pub fn all() -> impl ExactSizeIterator<Item = Action> + Clone {
        (0..Self::COUNT as u8).map(Action)
    }

    pub fn from_name(name: &str) -> Option<Action> {
        ACTION_TABLE
            .iter()
            .position(|(n, _, _)| *n == name)
            .map(|i| Action(i as u8))
    }

    pub fn name(self) -> &'static str {
        ACTION_TABLE[self.0 as usize].0
    }

    /// Present participle used by the prompt template ("baking").
    pub fn gerund(self) -> &'static str {
        ACTION_TABLE[self.0 as usize].1
    }

    /// Every surface form that counts as a mention of this action in free
    /// text. The bare form comes first.
    pub fn surface_forms(self) -> impl Iterator<Item = &'static str> {
        let (name, gerund, rest) = ACTION_TABLE[self.0 as usize];
        [name, gerund].into_iter().chain(rest.iter().copied())
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::from_name(s).ok_or_else(|| Error::Input(format!("unknown action `{s}`")))
    }
}

macro_rules! named_enum {
    (
        $(#[$meta:meta])*
        pub enum $ty:ident { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $ty { $($variant),+ }

        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Input(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(de::Error::custom)
            }
        }
    };
}

named_enum! {
    /// Actor gender used when rendering prompts.
    pub enum Gender {
        Man => "man",
        Woman => "woman",
        Person => "person",
        NonBinaryPerson => "non-binary person",
    }
}

named_enum! {
    pub enum Ethnicity {
        White => "White",
        Black => "Black",
        Indian => "Indian",
        EastAsian => "East Asian",
        SoutheastAsian => "Southeast Asian",
        MiddleEastern => "Middle Eastern",
        Latino => "Latino",
    }
}

named_enum! {
    /// Which social attribute a judge is asked about.
    pub enum Attribute {
        Gender => "gender",
        Ethnicity => "ethnicity",
    }
}

impl Ethnicity {
    pub const COUNT: usize = 7;

    /// Column order of the report tables.
    pub const TABLE_ORDER: [Ethnicity; 7] = [
        Ethnicity::White,
        Ethnicity::Black,
        Ethnicity::Latino,
        Ethnicity::EastAsian,
        Ethnicity::SoutheastAsian,
        Ethnicity::Indian,
        Ethnicity::MiddleEastern,
    ];
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// A judge's answer for one attribute: a member of the attribute's closed
/// label set, or `unidentifiable`.
///
/// The gender label set a judge may return is {man, woman}; `person` and
/// `non-binary person` only exist on the prompt side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Gender(Gender),
    Ethnicity(Ethnicity),
    Unidentifiable,
}

pub const UNIDENTIFIABLE: &str = "unidentifiable";

impl Label {
    /// Closed label set a judge may answer with for `attribute`, in the
    /// fixed tie-break order.
    pub fn closed_set(attribute: Attribute) -> &'static [Label] {
        const GENDER: [Label; 2] = [Label::Gender(Gender::Man), Label::Gender(Gender::Woman)];
        const ETHNICITY: [Label; 7] = [
            Label::Ethnicity(Ethnicity::White),
            Label::Ethnicity(Ethnicity::Black),
            Label::Ethnicity(Ethnicity::Indian),
            Label::Ethnicity(Ethnicity::EastAsian),
            Label::Ethnicity(Ethnicity::SoutheastAsian),
            Label::Ethnicity(Ethnicity::MiddleEastern),
            Label::Ethnicity(Ethnicity::Latino),
        ];
        match attribute {
            Attribute::Gender => &GENDER,
            Attribute::Ethnicity => &ETHNICITY,
        }
    }

    pub fn is_identified(self) -> bool {
        !matches!(self, Label::Unidentifiable)
    }

    /// `None` for `Unidentifiable`, which belongs to every attribute.
    pub fn attribute(self) -> Option<Attribute> {
        match self {
            Label::Gender(_) => Some(Attribute::Gender),
            Label::Ethnicity(_) => Some(Attribute::Ethnicity),
            Label::Unidentifiable => None,
        }
    }

    pub fn belongs_to(self, attribute: Attribute) -> bool {
        self.attribute().is_none_or(|a| a == attribute)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Gender(g) => g.as_str(),
            Label::Ethnicity(e) => e.as_str(),
            Label::Unidentifiable => UNIDENTIFIABLE,
        }
    }

    pub fn gender(self) -> Option<Gender> {
        match self {
            Label::Gender(g) => Some(g),
            _ => None,
        }
    }

    pub fn ethnicity(self) -> Option<Ethnicity> {
        match self {
            Label::Ethnicity(e) => Some(e),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == UNIDENTIFIABLE {
            return Ok(Label::Unidentifiable);
        }
        if let Ok(g) = s.parse::<Gender>() {
            return Ok(Label::Gender(g));
        }
        s.parse::<Ethnicity>()
            .map(Label::Ethnicity)
            .map_err(|_| Error::Input(format!("unknown label `{s}`")))
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Words that must never appear in a context clause, since contexts may not
/// carry demographic information.
pub const DEMOGRAPHIC_WORDS: &[&str] = &[
    "man", "woman", "men", "women", "person", "people", "boy", "girl", "boys", "girls", "he",
    "she", "him", "her", "his", "hers", "male", "female", "lady", "ladies", "gentleman",
    "non-binary", "nonbinary", "white", "black", "indian", "asian", "eastern", "latino", "latina",
];
