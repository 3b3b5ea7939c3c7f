use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::model::FrameEmbeddings;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub const MHAP_HEADS: usize = 4;
const PREFIX: &str = "pool";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Mhap,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Mhap => "mhap",
        }
    }
}

/// Mean over valid frames.
pub fn pool_mean(f: &FrameEmbeddings) -> Result<Vec<f32>, EvalError> {
    let n = f.n_valid();
    if n == 0 {
        return Err(EvalError::Empty("valid frames"));
    }
    let mut acc = vec![0f64; f.dim()];
    for row in f.valid_rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

/// Attention-pooling parameters: one learned query per head, a key
/// projection, and an output linear layer.
pub fn init_mhap(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<(), EvalError> {
    if heads == 0 || dim % heads != 0 {
        return Err(EvalError::Shape(format!("dim {dim} not divisible by {heads} heads")));
    }
    store.init_normal(format!("{PREFIX}/queries"), &[heads, dim / heads], 0.02, rng);
    store.init_xavier(format!("{PREFIX}/k/w"), dim, dim, rng);
    store.init_xavier(format!("{PREFIX}/o/w"), dim, dim, rng);
    store.init_const(format!("{PREFIX}/o/b"), &[dim], 0.0);
    Ok(())
}

/// Pooled `[1 × d]` vector and per-head attention weights (`[1 × T]` each).
pub fn mhap_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    frames: Var,
    mask: &[bool],
) -> Result<(Var, Vec<Var>), EvalError> {
    if !mask.iter().any(|&m| m) {
        return Err(EvalError::Empty("valid frames"));
    }
    let q = store.require(&format!("{PREFIX}/queries"))?;
    let (heads, dh) = (q.rows(), q.cols());
    let queries = g.param(&format!("{PREFIX}/queries"), q);
    let wk = g.param(&format!("{PREFIX}/k/w"), store.require(&format!("{PREFIX}/k/w"))?);
    let keys = g.matmul(frames, wk)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.gather_rows(queries, &[h])?;
        let kh = g.slice_cols(keys, h * dh, dh)?;
        let vh = g.slice_cols(frames, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let w = g.softmax_masked(scores, Some(mask))?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(&format!("{PREFIX}/o/w"), store.require(&format!("{PREFIX}/o/w"))?);
    let bo = g.param(&format!("{PREFIX}/o/b"), store.require(&format!("{PREFIX}/o/b"))?);
    let y = g.matmul(cat, wo)?;
    Ok((g.add_row(y, bo)?, weights))
}

/// Inference-time attention pooling: the pooled vector and each head's
/// frame weights.
pub fn pool_mhap(f: &FrameEmbeddings, store: &ParamStore) -> Result<(Vec<f32>, Vec<Vec<f32>>), EvalError> {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(f.frames.clone());
    let (y, w) = mhap_graph(&mut g, store, x, &f.mask)?;
    let weights = w.iter().map(|&v| g.value(v).data().to_vec()).collect();
    Ok((g.value(y).data().to_vec(), weights))
}

/// Stacks pooled vectors into an `[N × d]` matrix.
pub fn stack(rows: &[Vec<f32>]) -> Result<Tensor, EvalError> {
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), d], data)?)
}
