use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, CorpusError};

/// Lowercases, removes ASCII punctuation and splits on whitespace.
pub fn words(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_pairs: usize,
    pub n_vocab: usize,
    pub avg_sent: f64,
    /// n → unique n-grams / total n-grams, corpus-wide. Zero when the
    /// corpus has no n-gram of that order.
    pub distinct_n: BTreeMap<usize, f64>,
}

/// Partial counts over a shard of captions; `merge` is associative and
/// commutative so shards can be combined in any order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexicalAccumulator {
    n_captions: usize,
    n_words: usize,
    unique: [HashSet<Vec<String>>; 4],
    totals: [usize; 4],
}

impl LexicalAccumulator {
    pub fn add_caption(&mut self, caption: &str) {
        let w = words(caption);
        self.n_captions += 1;
        self.n_words += w.len();
        for n in 1..=4 {
            if w.len() < n {
                continue;
            }
            for gram in w.windows(n) {
                self.unique[n - 1].insert(gram.to_vec());
            }
            self.totals[n - 1] += w.len() + 1 - n;
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.n_captions += other.n_captions;
        self.n_words += other.n_words;
        for (mine, theirs) in self.unique.iter_mut().zip(other.unique) {
            mine.extend(theirs);
        }
        for (a, b) in self.totals.iter_mut().zip(other.totals) {
            *a += b;
        }
        self
    }

    pub fn finish(&self) -> Result<CorpusStats, CorpusError> {
        if self.n_captions == 0 {
            return Err(CorpusError::Empty);
        }
        let distinct_n = (1..=4)
            .map(|n| {
                let total = self.totals[n - 1];
                let ratio = if total == 0 {
                    0.0
                } else {
                    self.unique[n - 1].len() as f64 / total as f64
                };
                (n, ratio)
            })
            .collect();
        Ok(CorpusStats {
            n_pairs: self.n_captions,
            n_vocab: self.unique[0].len(),
            avg_sent: self.n_words as f64 / self.n_captions as f64,
            distinct_n,
        })
    }
}

pub fn lexical_stats(records: &[CaptionRecord]) -> Result<CorpusStats, CorpusError> {
    let mut acc = LexicalAccumulator::default();
    for r in records {
        for c in &r.captions {
            acc.add_caption(c);
        }
    }
    acc.finish()
}
