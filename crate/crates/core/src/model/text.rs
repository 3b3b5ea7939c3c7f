//! Text encoder (bidirectional, for the contrastive tower) and text decoder
//! (self-attention plus cross-attention over audio frames, for captioning).

use rand_chacha::ChaCha8Rng;

use super::config::{DecoderConfig, MAX_TOKENS};
use super::layers::{
    self, attention, attention_mask, block, feed_forward, init_attention, init_block, init_feed_forward, init_layer_norm,
    layer_norm, linear, param,
};
use super::ModelError;
use crate::tensor::{Graph, ParamStore, Scalar, Var};
use crate::tokenizer::PAD;

fn embed_with<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, prefix: &str, tokens: &[u32]) -> Result<Var, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput("token sequence"));
    }
    if tokens.len() > MAX_TOKENS {
        return Err(ModelError::TooLong {
            len: tokens.len(),
            max: MAX_TOKENS,
        });
    }
    let table = param(g, store, &format!("{prefix}/tok"))?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = g.gather_rows(table, &ids)?;
    let pos_table = param(g, store, &format!("{prefix}/pos"))?;
    let pos = g.gather_rows(pos_table, &(0..tokens.len()).collect::<Vec<_>>())?;
    Ok(g.add(tok, pos)?)
}

pub(crate) fn init_encoder(store: &mut ParamStore, cfg: &DecoderConfig, vocab: usize, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    store.init_normal("text_enc/tok", &[vocab, d], 0.02, rng);
    store.init_normal("text_enc/pos", &[MAX_TOKENS, d], 0.02, rng);
    for l in 0..cfg.encoder_layers() {
        init_block(store, &format!("text_enc/layer{l}"), d, cfg.ffn_mult, rng);
    }
    init_layer_norm(store, "text_enc/final_ln", d);
}

pub fn encoder_param_count(cfg: &DecoderConfig, vocab: usize) -> usize {
    let d = cfg.dim;
    vocab * d + MAX_TOKENS * d + cfg.encoder_layers() * layers::block_param_count(d, cfg.ffn_mult) + 2 * d
}

/// Bidirectional encoding of `tokens`; returns the normalized state at the
/// first (BOS) position as a `[1 × dim]` row. PAD positions are masked out.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    cfg: &DecoderConfig,
    tokens: &[u32],
) -> Result<Var, ModelError> {
    let mut x = embed_with(g, store, "text_enc", tokens)?;
    let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
    let mask = attention_mask(tokens.len(), &valid, false);
    for l in 0..cfg.encoder_layers() {
        x = block(g, store, &format!("text_enc/layer{l}"), x, &mask, cfg.heads)?;
    }
    let first = g.gather_rows(x, &[0])?;
    layer_norm(g, store, "text_enc/final_ln", first)
}

pub(crate) fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, vocab: usize, memory_dim: usize, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    store.init_normal("text_dec/tok", &[vocab, d], 0.02, rng);
    store.init_normal("text_dec/pos", &[MAX_TOKENS, d], 0.02, rng);
    for l in 0..cfg.layers {
        let p = format!("text_dec/layer{l}");
        init_layer_norm(store, &format!("{p}/ln1"), d);
        init_attention(store, &format!("{p}/self"), d, d, rng);
        init_layer_norm(store, &format!("{p}/cross_ln"), d);
        init_attention(store, &format!("{p}/cross"), d, memory_dim, rng);
        init_layer_norm(store, &format!("{p}/ln2"), d);
        init_feed_forward(store, &format!("{p}/ffn"), d, cfg.ffn_mult, rng);
    }
    init_layer_norm(store, "text_dec/final_ln", d);
    // Small output weights start the decoder near the uniform distribution.
    store.init_normal("text_dec/out/w", &[d, vocab], 0.02, rng);
    store.init_const("text_dec/out/b", &[vocab], 0.0);
}

pub fn decoder_param_count(cfg: &DecoderConfig, vocab: usize, memory_dim: usize) -> usize {
    let d = cfg.dim;
    let cross = 2 * (d * d + d) + 2 * (memory_dim * d + d) + 2 * d;
    vocab * d + MAX_TOKENS * d + cfg.layers * (layers::block_param_count(d, cfg.ffn_mult) + cross) + 2 * d + d * vocab + vocab
}

/// True for decoder parameters that belong to cross-attention.
pub fn is_cross_attention(name: &str) -> bool {
    name.starts_with("text_dec/") && name.contains("/cross")
}

/// Decoder input embeddings (token + position) for `inputs`.
pub fn embed_inputs<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, inputs: &[u32]) -> Result<Var, ModelError> {
    embed_with(g, store, "text_dec", inputs)
}

/// Decoder logits `[len(inputs) × vocab]` given audio `memory` frames.
/// With `causal` each position sees only itself and earlier inputs.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    cfg: &DecoderConfig,
    memory: Var,
    memory_mask: &[bool],
    inputs: &[u32],
    causal: bool,
) -> Result<Var, ModelError> {
    let x = embed_inputs(g, store, inputs)?;
    let valid: Vec<bool> = inputs.iter().map(|&t| t != PAD).collect();
    decode_embedded(g, store, cfg, x, &valid, memory, memory_mask, causal)
}

/// As [`decode`], starting from already-embedded inputs `x`.
#[allow(clippy::too_many_arguments)]
pub fn decode_embedded<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    cfg: &DecoderConfig,
    mut x: Var,
    valid: &[bool],
    memory: Var,
    memory_mask: &[bool],
    causal: bool,
) -> Result<Var, ModelError> {
    if memory_mask.is_empty() || !memory_mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyInput("audio memory"));
    }
    let len = g.shape(x)[0];
    let self_mask = attention_mask(len, valid, causal);
    let cross_mask = attention_mask(len, memory_mask, false);
    for l in 0..cfg.layers {
        let p = format!("text_dec/layer{l}");
        let h = layer_norm(g, store, &format!("{p}/ln1"), x)?;
        let a = attention(g, store, &format!("{p}/self"), h, h, &self_mask, cfg.heads)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, store, &format!("{p}/cross_ln"), x)?;
        let a = attention(g, store, &format!("{p}/cross"), h, memory, &cross_mask, cfg.heads)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, store, &format!("{p}/ln2"), x)?;
        let f = feed_forward(g, store, &format!("{p}/ffn"), h)?;
        x = g.add(x, f)?;
    }
    let h = layer_norm(g, store, "text_dec/final_ln", x)?;
    linear(g, store, "text_dec/out", h)
}
