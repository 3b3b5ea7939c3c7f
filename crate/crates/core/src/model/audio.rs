//! Zipformer-lite audio encoder.
//!
//! 100 Hz log-Mel frames pass through a stride-2 convolution (50 Hz), then
//! six transformer stages at 50, 25, 12.5, 6.25, 12.5 and 25 Hz. Rates drop
//! by averaging frame pairs and rise by repeating frames; the up-path adds
//! the output of the down-path stage at the same rate. All stage outputs
//! are aligned to 25 Hz and summed.
//!
//! Every halving rounds up: a sequence of `n` frames becomes `ceil(n / 2)`,
//! where a trailing unpaired frame is averaged alone. A `T`-frame input
//! therefore yields `ceil(T / 4)` output frames.

use rand_chacha::ChaCha8Rng;

use super::config::{EncoderConfig, MAX_FRAMES, MIN_MEL_FRAMES, STAGE_LEVELS};
use super::layers::{self, attention_mask, block, init_block, init_layer_norm, init_linear, layer_norm, linear, param};
use super::ModelError;
use crate::audio::N_MELS;
use crate::tensor::{Graph, ParamStore, RowPlan, Scalar, Tensor, Var};

const KERNEL: usize = 3;

/// Encoder output inside a graph: `[T' × dim]` frames and their validity.
#[derive(Clone, Debug)]
pub struct AudioEncoding {
    pub frames: Var,
    pub mask: Vec<bool>,
}

pub fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Output frame count for a `mel_frames`-long input.
pub fn output_frames(mel_frames: usize) -> usize {
    halve(halve(mel_frames))
}

fn prefix_mask(len: usize, valid: usize) -> Vec<bool> {
    (0..len).map(|i| i < valid).collect()
}

/// Pair-average `len` rows down to `ceil(len / 2)`, ignoring rows `>= valid`.
fn down_plan(len: usize, valid: usize) -> RowPlan {
    RowPlan {
        rows: (0..halve(len))
            .map(|t| {
                let src: Vec<usize> = [2 * t, 2 * t + 1].into_iter().filter(|&j| j < valid).collect();
                let w = 1.0 / src.len().max(1) as f64;
                src.into_iter().map(|j| (j, w)).collect()
            })
            .collect(),
    }
}

/// Repeat each row twice to produce `len` rows; rows `>= valid` are zero.
fn up_plan(len: usize, valid: usize) -> RowPlan {
    RowPlan {
        rows: (0..len).map(|t| if t < valid { vec![(t / 2, 1.0)] } else { vec![] }).collect(),
    }
}

/// Shifted view for tap `k` of the stride-2, padding-1 convolution.
fn conv_tap_plan(out_len: usize, valid_in: usize, k: usize) -> RowPlan {
    RowPlan {
        rows: (0..out_len)
            .map(|t| {
                let idx = (2 * t + k) as isize - 1;
                if idx >= 0 && (idx as usize) < valid_in {
                    vec![(idx as usize, 1.0)]
                } else {
                    vec![]
                }
            })
            .collect(),
    }
}

pub(crate) fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    init_linear(store, "audio/frontend", KERNEL * N_MELS, d, true, rng);
    store.init_normal("audio/pos", &[MAX_FRAMES, d], 0.02, rng);
    for (s, &n) in cfg.stage_blocks.iter().enumerate() {
        for b in 0..n {
            init_block(store, &format!("audio/stage{s}/block{b}"), d, cfg.ffn_mult, rng);
        }
    }
    init_layer_norm(store, "audio/final_ln", d);
}

pub fn param_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.dim;
    (KERNEL * N_MELS * d + d) + MAX_FRAMES * d + cfg.n_layers() * layers::block_param_count(d, cfg.ffn_mult) + 2 * d
}

fn stage<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    cfg: &EncoderConfig,
    s: usize,
    mut x: Var,
    valid: usize,
) -> Result<Var, ModelError> {
    let len = g.shape(x)[0];
    let mask = attention_mask(len, &prefix_mask(len, valid), false);
    for b in 0..cfg.stage_blocks[s] {
        x = block(g, store, &format!("audio/stage{s}/block{b}"), x, &mask, cfg.heads)?;
    }
    Ok(x)
}

/// Encodes one clip. `mel` may be zero-padded past `valid` frames; padded
/// frames never influence valid outputs.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    cfg: &EncoderConfig,
    mel: &Tensor,
    valid: usize,
) -> Result<AudioEncoding, ModelError> {
    if mel.cols() != N_MELS {
        return Err(ModelError::Config(format!("expected {N_MELS} mel bands, got {}", mel.cols())));
    }
    let total = mel.rows();
    if valid < MIN_MEL_FRAMES || valid > total {
        return Err(ModelError::TooShort {
            frames: valid.min(total),
            min: MIN_MEL_FRAMES,
        });
    }
    let len50 = halve(total);
    if len50 > MAX_FRAMES {
        return Err(ModelError::TooLong {
            len: len50,
            max: MAX_FRAMES,
        });
    }
    // stage s runs at len[level], valid[level]
    let mut lens = [0usize; 4];
    let mut valids = [0usize; 4];
    lens[0] = len50;
    valids[0] = halve(valid);
    for l in 1..4 {
        lens[l] = halve(lens[l - 1]);
        valids[l] = halve(valids[l - 1]);
    }

    let input = g.constant(mel.cast());
    let taps = (0..KERNEL)
        .map(|k| g.row_combine(input, conv_tap_plan(len50, valid, k)))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = g.concat_cols(&taps)?;
    let x = linear(g, store, "audio/frontend", stacked)?;
    let x = g.gelu(x);
    let pos_table = param(g, store, "audio/pos")?;
    let pos = g.gather_rows(pos_table, &(0..len50).collect::<Vec<_>>())?;
    let mut x = g.add(x, pos)?;

    let mut outputs: Vec<Var> = Vec::with_capacity(6);
    for (s, &level) in STAGE_LEVELS.iter().enumerate() {
        let level = level as usize;
        if s > 0 {
            let prev = STAGE_LEVELS[s - 1] as usize;
            if level > prev {
                x = g.row_combine(x, down_plan(lens[prev], valids[prev]))?;
            } else {
                x = g.row_combine(x, up_plan(lens[level], valids[level]))?;
                // skip from the down-path stage at this rate
                let skip = outputs[STAGE_LEVELS.iter().position(|&l| l as usize == level).expect("down-path stage")];
                x = g.add(x, skip)?;
            }
        }
        x = stage(g, store, cfg, s, x, valids[level])?;
        outputs.push(x);
    }

    let mut fused: Option<Var> = None;
    for (s, &out) in outputs.iter().enumerate() {
        let mut level = STAGE_LEVELS[s] as usize;
        let mut y = out;
        while level < 1 {
            y = g.row_combine(y, down_plan(lens[level], valids[level]))?;
            level += 1;
        }
        while level > 1 {
            y = g.row_combine(y, up_plan(lens[level - 1], valids[level - 1]))?;
            level -= 1;
        }
        fused = Some(match fused {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    let frames = layer_norm(g, store, "audio/final_ln", fused.expect("six stages"))?;
    Ok(AudioEncoding {
        frames,
        mask: prefix_mask(lens[1], valids[1]),
    })
}
