//! Caption corpus construction: ingest line-oriented manifests, merge
//! captions per audio clip, filter, draw nested subsets and measure
//! lexical diversity.

mod build;
mod manifest;
mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{consolidate, filter_corpus, read_blocklist, sample_subsets, FilterOutcome, DURATION_TOLERANCE};
pub use manifest::{ingest, ingest_reader, write_manifest, IngestReport, ManifestLine};
pub use stats::{lexical_stats, words, CorpusStats, LexicalAccumulator};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest is corrupt: {malformed} of {total} lines malformed")]
    CorruptManifest { malformed: usize, total: usize },
    #[error("audio `{audio_id}` has conflicting durations {first} s and {second} s")]
    Consistency { audio_id: String, first: f64, second: f64 },
    #[error("subset of {requested} records requested from a corpus of {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("subset sizes must be ascending, got {0:?}")]
    SubsetOrder(Vec<usize>),
    #[error("corpus is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sound,
    Speech,
    Music,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Sound, Domain::Speech, Domain::Music];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sound => "sound",
            Domain::Speech => "speech",
            Domain::Music => "music",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sound" => Ok(Domain::Sound),
            "speech" => Ok(Domain::Speech),
            "music" => Ok(Domain::Music),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// One audio clip and every caption attached to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub audio_id: String,
    pub audio_path: String,
    pub duration: f64,
    pub source: String,
    pub domain: Domain,
    pub captions: Vec<String>,
}

impl CaptionRecord {
    pub fn n_captions(&self) -> usize {
        self.captions.len()
    }
}

/// Total (audio, caption) pairs.
pub fn n_pairs(records: &[CaptionRecord]) -> usize {
    records.iter().map(CaptionRecord::n_captions).sum()
}
