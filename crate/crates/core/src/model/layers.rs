//! Parameterized building blocks shared by the audio and text towers.

use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub(crate) fn param<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, name: &str) -> Result<Var, ModelError> {
    Ok(g.param(name, store.require(name)?))
}

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) {
    store.init_xavier(format!("{prefix}/w"), d_in, d_out, rng);
    if bias {
        store.init_const(format!("{prefix}/b"), &[d_out], 0.0);
    }
}

/// `x·W (+ b)`; the bias is used when the store has one.
pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = param(g, store, &format!("{prefix}/w"))?;
    let mut y = g.matmul(x, w)?;
    let bias = format!("{prefix}/b");
    if store.get(&bias).is_some() {
        let b = param(g, store, &bias)?;
        y = g.add_row(y, b)?;
    }
    Ok(y)
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.init_const(format!("{prefix}/g"), &[dim], 1.0);
    store.init_const(format!("{prefix}/b"), &[dim], 0.0);
}

pub(crate) fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let gain = param(g, store, &format!("{prefix}/g"))?;
    let bias = param(g, store, &format!("{prefix}/b"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Query/output projections are `dim × dim`; key/value projections map the
/// attended sequence's width `kv_dim` to `dim`.
pub(crate) fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, kv_dim: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{prefix}/q"), dim, dim, true, rng);
    init_linear(store, &format!("{prefix}/k"), kv_dim, dim, true, rng);
    init_linear(store, &format!("{prefix}/v"), kv_dim, dim, true, rng);
    init_linear(store, &format!("{prefix}/o"), dim, dim, true, rng);
}

/// Row-major `[tq × tk]` keep-mask: key `j` is visible to query `i` when it
/// is valid and, under `causal`, not in the future.
pub fn attention_mask(tq: usize, key_valid: &[bool], causal: bool) -> Vec<bool> {
    let tk = key_valid.len();
    let mut m = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        for (j, &valid) in key_valid.iter().enumerate() {
            m.push(valid && (!causal || j <= i));
        }
    }
    m
}

/// Multi-head scaled dot-product attention from `queries` over `memory`.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    prefix: &str,
    queries: Var,
    memory: Var,
    mask: &[bool],
    heads: usize,
) -> Result<Var, ModelError> {
    let dim = g.shape(queries)[1];
    let dh = dim / heads;
    let q = linear(g, store, &format!("{prefix}/q"), queries)?;
    let k = linear(g, store, &format!("{prefix}/k"), memory)?;
    let v = linear(g, store, &format!("{prefix}/v"), memory)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax_masked(scores, Some(mask))?;
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, store, &format!("{prefix}/o"), joined)
}

pub(crate) fn init_feed_forward(store: &mut ParamStore, prefix: &str, dim: usize, mult: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{prefix}/w1"), dim, dim * mult, true, rng);
    init_linear(store, &format!("{prefix}/w2"), dim * mult, dim, true, rng);
}

pub(crate) fn feed_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = linear(g, store, &format!("{prefix}/w1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}/w2"), h)
}

pub(crate) fn init_block(store: &mut ParamStore, prefix: &str, dim: usize, mult: usize, rng: &mut ChaCha8Rng) {
    init_layer_norm(store, &format!("{prefix}/ln1"), dim);
    init_attention(store, &format!("{prefix}/attn"), dim, dim, rng);
    init_layer_norm(store, &format!("{prefix}/ln2"), dim);
    init_feed_forward(store, &format!("{prefix}/ffn"), dim, mult, rng);
}

/// Pre-norm transformer block: self-attention then feed-forward, each with
/// a residual connection.
pub(crate) fn block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    mask: &[bool],
    heads: usize,
) -> Result<Var, ModelError> {
    let h = layer_norm(g, store, &format!("{prefix}/ln1"), x)?;
    let a = attention(g, store, &format!("{prefix}/attn"), h, h, mask, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, store, &format!("{prefix}/ln2"), x)?;
    let f = feed_forward(g, store, &format!("{prefix}/ffn"), h)?;
    Ok(g.add(x, f)?)
}

/// Scalar parameters in one [`block`].
pub fn block_param_count(dim: usize, mult: usize) -> usize {
    let ffn = dim * mult;
    4 * dim + 4 * (dim * dim + dim) + (dim * ffn + ffn) + (ffn * dim + dim)
}
