//! Shared helpers for integration tests: finite-difference gradient checks,
//! brute-force metric oracles and small fixtures.
#![allow(dead_code)]

pub mod gradsuite;

use std::collections::BTreeMap;

use caplab::corpus::{CaptionRecord, Domain};
use caplab::model::AudioLanguageModel;
use caplab::objectives::Example;
use caplab::tensor::{Graph, Tensor, Var};
use caplab::tokenizer::{BOS, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floor on the denominator, so gradients below the
/// floor are compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.731 + 0.29).sin() + 0.1).collect()
}

/// Reduces any output to a scalar by a fixed, non-uniform weighted sum.
fn scalarize(g: &mut Graph<f64>, out: Var) -> Var {
    if g.value(out).numel() == 1 {
        return g.reshape(out, &[1]).expect("scalar reshape");
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).numel();
    let w = g.constant(Tensor::new(shape, weights(n)).expect("weights"));
    let prod = g.mul(out, w).expect("weighted output");
    g.sum_all(prod)
}

/// Largest relative error between backprop and central differences over
/// every element of every input.
pub fn check_op(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let s = scalarize(&mut g, out);
        g.value(s).data()[0]
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let s = scalarize(&mut g, out);
    let grads = g.backward(s).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Finite-difference check of a model-level scalar loss in `f64`. For each
/// parameter tensor the element with the largest analytic gradient and
/// `extra` random elements are perturbed. Returns the worst relative error
/// and the number of elements checked.
pub fn check_model(
    model: &AudioLanguageModel,
    extra: usize,
    seed: u64,
    build: impl Fn(&mut Graph<f64>) -> Var,
) -> (f64, usize) {
    let mut g = Graph::<f64>::new();
    let loss = build(&mut g);
    let grads = g.backward(loss).expect("backward");
    let analytic = g.param_grads(&grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, grad) in &analytic {
        let base: Tensor<f64> = model.params.get(name).expect("bound parameter").cast();
        let mut picks = vec![grad
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)];
        for _ in 0..extra {
            picks.push(rng.gen_range(0..base.numel()));
        }
        for i in picks {
            let at = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::<f64>::new();
                g.override_param(name, t);
                let l = build(&mut g);
                g.value(l).data()[0]
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles
// ---------------------------------------------------------------------------

/// 1-based rank of item `i` when scores are ordered high to low and ties
/// go to the lower index, found by counting rather than sorting.
pub fn rank_by_count(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

/// Average precision accumulated rank by rank.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let ranks: Vec<usize> = (0..n).map(|i| rank_by_count(scores, i)).collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for r in 1..=n {
        let i = ranks.iter().position(|&x| x == r).expect("ranks are a permutation");
        if labels[i] {
            hits += 1;
            sum += hits as f64 / r as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// The same average precision as an exact fraction `(num, den)`.
pub fn ap_exact(scores: &[f64], labels: &[bool]) -> Option<(u128, u128)> {
    let n = scores.len();
    let lcm: u128 = (1..=n as u128).fold(1, |acc, k| acc * k / gcd(acc, k));
    let mut num = 0u128;
    let mut pos = 0u128;
    for i in 0..n {
        if !labels[i] {
            continue;
        }
        let r = rank_by_count(scores, i) as u128;
        let hits_up_to = (0..n).filter(|&j| labels[j] && rank_by_count(scores, j) as u128 <= r).count() as u128;
        num += hits_up_to * lcm / r;
        pos += 1;
    }
    (pos > 0).then(|| (num, lcm * pos))
}

pub fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn map_oracle(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<(f64, usize)> {
    let c = scores.first().map_or(0, Vec::len);
    let mut aps = Vec::new();
    for k in 0..c {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let lab: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        if let Some(ap) = ap_oracle(&col, &lab) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for a in &aps {
        sum += a;
    }
    Some((sum / aps.len() as f64, c - aps.len()))
}

/// Recall@k for paired embeddings drawn from a pool: `audio[i]` and
/// `text[i]` index pool vectors. Cosine order between different pool
/// vectors uses a direct formula; identical pool indices tie exactly.
pub fn recall_oracle(pool: &[Vec<f64>], audio: &[usize], text: &[usize], ks: &[usize]) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = audio.len();
    let rank = |query: &[usize], items: &[usize], i: usize| -> usize {
        let q = &pool[query[i]];
        let own = cos(q, &pool[items[i]]);
        (0..n)
            .filter(|&j| {
                if items[j] == items[i] {
                    j < i
                } else {
                    cos(q, &pool[items[j]]) > own
                }
            })
            .count()
    };
    let recall = |query: &[usize], items: &[usize]| -> BTreeMap<usize, f64> {
        let ranks: Vec<usize> = (0..n).map(|i| rank(query, items, i)).collect();
        ks.iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64))
            .collect()
    };
    (recall(text, audio), recall(audio, text))
}

/// Longest common subsequence by enumerating every subsequence of the
/// shorter sequence.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[&String]| {
        let mut it = long.iter();
        sub.iter().all(|w| it.any(|x| x == *w))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|&i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn simple_words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn rouge_oracle(candidate: &str, reference: &str, beta: f64) -> f64 {
    let c = simple_words(candidate);
    let r = simple_words(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_brute(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Unique over total n-grams, counting uniqueness by pairwise comparison.
pub fn distinct_oracle(captions: &[String], n: usize) -> f64 {
    let mut grams: Vec<Vec<String>> = Vec::new();
    for c in captions {
        let w = simple_words(c);
        if w.len() >= n {
            for i in 0..=w.len() - n {
                grams.push(w[i..i + n].to_vec());
            }
        }
    }
    if grams.is_empty() {
        return 0.0;
    }
    let unique = (0..grams.len()).filter(|&i| !grams[..i].contains(&grams[i])).count();
    unique as f64 / grams.len() as f64
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

pub fn record(id: &str, duration: f64, captions: &[&str]) -> CaptionRecord {
    CaptionRecord {
        audio_id: id.into(),
        audio_path: format!("{id}.wav"),
        duration,
        source: "test".into(),
        domain: Domain::Sound,
        captions: captions.iter().map(|s| s.to_string()).collect(),
    }
}

/// Random mel-like input of `frames` rows.
pub fn random_mel(frames: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * caplab::audio::N_MELS).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![frames, caplab::audio::N_MELS], data).expect("mel shape")
}

pub fn example(id: &str, frames: usize, seed: u64, body: &[u32]) -> Example {
    let mut tokens = vec![BOS];
    tokens.extend_from_slice(body);
    tokens.push(EOS);
    Example {
        id: id.into(),
        mel: random_mel(frames, seed),
        valid: frames,
        tokens,
    }
}
