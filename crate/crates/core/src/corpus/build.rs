use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CaptionRecord, CorpusError};

/// Largest duration disagreement (seconds) tolerated when merging records.
pub const DURATION_TOLERANCE: f64 = 0.1;

fn merged_source(a: &str, b: &str) -> String {
    let names: BTreeSet<&str> = a.split('+').chain(b.split('+')).filter(|s| !s.is_empty()).collect();
    names.into_iter().collect::<Vec<_>>().join("+")
}

/// Merges records that share an `audio_id`. Output keeps first-seen order;
/// captions are concatenated in ingestion order with exact duplicates
/// dropped, and sources become the sorted union joined by `+`.
pub fn consolidate(records: Vec<CaptionRecord>) -> Result<Vec<CaptionRecord>, CorpusError> {
    let mut out: Vec<CaptionRecord> = Vec::with_capacity(records.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: Vec<HashSet<String>> = Vec::new();
    for r in records {
        match index.get(&r.audio_id) {
            Some(&i) => {
                let acc = &mut out[i];
                if (acc.duration - r.duration).abs() > DURATION_TOLERANCE {
                    return Err(CorpusError::Consistency {
                        audio_id: r.audio_id,
                        first: acc.duration,
                        second: r.duration,
                    });
                }
                acc.source = merged_source(&acc.source, &r.source);
                for c in r.captions {
                    if seen[i].insert(c.clone()) {
                        acc.captions.push(c);
                    }
                }
            }
            None => {
                let mut set = HashSet::new();
                let mut rec = r;
                rec.captions.retain(|c| set.insert(c.clone()));
                rec.source = merged_source(&rec.source, "");
                index.insert(rec.audio_id.clone(), out.len());
                seen.push(set);
                out.push(rec);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<CaptionRecord>,
    pub dropped_duration: usize,
    pub dropped_overlap: usize,
}

impl FilterOutcome {
    pub fn dropped(&self) -> usize {
        self.dropped_duration + self.dropped_overlap
    }
}

/// Drops blocklisted ids (reason "overlap") and clips longer than
/// `max_duration` seconds (reason "duration"). Overlap is checked first.
pub fn filter_corpus(records: Vec<CaptionRecord>, max_duration: f64, blocklist: &HashSet<String>) -> FilterOutcome {
    assert!(max_duration > 0.0, "max_duration must be positive");
    let mut out = FilterOutcome::default();
    for r in records {
        if blocklist.contains(&r.audio_id) {
            out.dropped_overlap += 1;
        } else if r.duration > max_duration {
            out.dropped_duration += 1;
        } else {
            out.kept.push(r);
        }
    }
    out
}

/// Newline-delimited ids; blank lines ignored.
pub fn read_blocklist(path: &Path) -> Result<HashSet<String>, CorpusError> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Seeded shuffle, then subset `k` is the first `sizes[k]` records, so
/// every subset contains all smaller ones.
pub fn sample_subsets(
    records: &[CaptionRecord],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<CaptionRecord>>, CorpusError> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(CorpusError::SubsetOrder(sizes.to_vec()));
    }
    if let Some(&last) = sizes.last() {
        if last > records.len() {
            return Err(CorpusError::SubsetTooLarge {
                requested: last,
                available: records.len(),
            });
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sizes
        .iter()
        .map(|&n| order[..n].iter().map(|&i| records[i].clone()).collect())
        .collect())
}
