//! Demographic bias auditing for text-to-video generators and the reward
//! models used to align them.
//!
//! The pipeline: generate controlled prompts ([`catalog`]), have vision judges
//! label sampled frames ([`judge`], [`annotation`]), turn labels into bias
//! metrics ([`metrics`]), probe reward models directly ([`reward_probe`]),
//! mine preference datasets ([`preference_mining`]) and build balanced
//! preference pairs ([`curation`]).

pub mod annotation;
pub mod catalog;
pub mod config;
pub mod curation;
pub mod digest;
pub mod error;
pub mod jsonl;
pub mod judge;
pub mod metrics;
pub mod preference_mining;
pub mod reward_probe;
pub mod run;
pub mod taxonomy;
#[cfg(feature = "testkit")]
pub mod testkit;

pub use error::{Error, Result};
