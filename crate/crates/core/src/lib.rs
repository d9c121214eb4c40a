//! Contrastive bias discovery over generated story corpora.
//!
//! The pipeline has three stages:
//!
//! 1. [`corpusgen`] renders minimal-pair prompts (identical except for a
//!    group marker) and collects completions from a chat endpoint.
//! 2. [`textnorm`] and [`classes`] turn the corpus into lemma-multiset
//!    equivalence classes with per-group frequencies, and [`stats`] scores
//!    each class with a log-ratio BiasScore and filters out noise.
//! 3. [`fragments`] ranks marker-anchored sentence windows by the summed
//!    BiasScore of the classes they contain, and [`report`] renders the
//!    ranking for human review.
//!
//! [`pipeline`] wires the stages together with file artifacts between them.

pub mod classes;
pub mod config;
pub mod corpusgen;
pub mod error;
pub mod extreal;
pub mod fragments;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod textnorm;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Role of a corpus partition. Exactly two roles exist per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Interest,
    Control,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Interest, Group::Control];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Interest => "interest",
            Group::Control => "control",
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::Interest => Group::Control,
            Group::Control => Group::Interest,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interest" => Ok(Group::Interest),
            "control" => Ok(Group::Control),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// A pair of per-group counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub interest: u64,
    pub control: u64,
}

impl GroupCounts {
    pub fn get(&self, group: Group) -> u64 {
        match group {
            Group::Interest => self.interest,
            Group::Control => self.control,
        }
    }

    pub fn add(&mut self, group: Group, n: u64) {
        match group {
            Group::Interest => self.interest += n,
            Group::Control => self.control += n,
        }
    }

    pub fn total(&self) -> u64 {
        self.interest + self.control
    }

    pub fn merge(&mut self, other: &GroupCounts) {
        self.interest += other.interest;
        self.control += other.control;
    }

    pub fn swapped(&self) -> GroupCounts {
        GroupCounts {
            interest: self.control,
            control: self.interest,
        }
    }
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
