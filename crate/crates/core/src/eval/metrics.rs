use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::words;

/// RougeL recall weight.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub n_classes: usize,
    /// Classes left out because the eval split has no positive for them.
    pub skipped_classes: usize,
}

/// Average precision of one ranked column. Rows are ordered by descending
/// score with ties kept in index order. `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Macro-averaged AP over classes. `scores` and `labels` are `[N × C]`.
pub fn compute_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapResult, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Shape(format!("{} score rows vs {} label rows", scores.len(), labels.len())));
    }
    let c = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != c) || labels.iter().any(|r| r.len() != c) {
        return Err(EvalError::Shape("ragged score or label rows".into()));
    }
    let mut aps = Vec::with_capacity(c);
    let mut skipped = 0;
    for k in 0..c {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let lab: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        match average_precision(&col, &lab) {
            Some(ap) => aps.push(ap),
            None => skipped += 1,
        }
    }
    if aps.is_empty() {
        return Err(EvalError::NoPositives);
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        n_classes: aps.len(),
        skipped_classes: skipped,
    })
}

/// Recall@k in both directions, keyed by k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub text_to_audio: BTreeMap<usize, f64>,
    pub audio_to_text: BTreeMap<usize, f64>,
}

fn normalized(rows: &[Vec<f32>], what: &str) -> Result<Vec<Vec<f64>>, EvalError> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(EvalError::Shape(format!("{what} embedding {i} has no direction")));
            }
            Ok(r.iter().map(|&x| x as f64 / n).collect())
        })
        .collect()
}

/// 0-based rank of the true item `i` in `row`: items scoring higher, plus
/// items scoring equal with a lower index.
pub fn rank_of_match(row: &[f64], i: usize) -> usize {
    let s = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < i))
        .count()
}

pub fn recall_from_similarity(sim: &[Vec<f64>], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = sim.len();
    let ranks: Vec<usize> = sim.iter().enumerate().map(|(i, row)| rank_of_match(row, i)).collect();
    ks.iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64))
        .collect()
}

/// Cosine-similarity retrieval where row `i` of each side is a true pair.
pub fn retrieval_eval(audio: &[Vec<f32>], text: &[Vec<f32>], ks: &[usize]) -> Result<RetrievalResult, EvalError> {
    if audio.is_empty() {
        return Err(EvalError::Empty("retrieval set"));
    }
    if audio.len() != text.len() {
        return Err(EvalError::Shape(format!("{} audio vs {} text embeddings", audio.len(), text.len())));
    }
    let a = normalized(audio, "audio")?;
    let t = normalized(text, "text")?;
    if a.iter().chain(&t).any(|r| r.len() != a[0].len()) {
        return Err(EvalError::Shape("embedding widths differ".into()));
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let a2t: Vec<Vec<f64>> = a.iter().map(|ai| t.iter().map(|tj| dot(ai, tj)).collect()).collect();
    let t2a: Vec<Vec<f64>> = t.iter().map(|ti| a.iter().map(|aj| dot(aj, ti)).collect()).collect();
    Ok(RetrievalResult {
        text_to_audio: recall_from_similarity(&t2a, ks),
        audio_to_text: recall_from_similarity(&a2t, ks),
    })
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure over normalized words with recall weighted by
/// [`ROUGE_BETA`].
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    match (c.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}
