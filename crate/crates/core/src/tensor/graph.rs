use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map over rows: output row `i` is `sum_j w_ij * x[j]`.
///
/// Gathers, frame-pair averaging, repetition upsampling, shifted views for
/// strided convolution and masked means are all instances of this.
#[derive(Clone, Debug, Default)]
pub struct RowPlan {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowPlan {
    pub fn gather(indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowCombine {
        x: Var,
        plan: Rc<RowPlan>,
    },
    SumAll(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

type ParamFilter = Rc<dyn Fn(&str) -> bool>;

/// Tape of operations. Node indices are a topological order by
/// construction: every node's inputs were pushed before it.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    param_filter: Option<ParamFilter>,
    overrides: HashMap<String, Tensor<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m,n] · b[k,n]ᵀ -> [m,k]`
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n] -> [k,n]`
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * dinner
}

/// Softmax of one row, restricted to `mask` positions when given.
/// Masked positions get exactly zero weight.
fn softmax_row<T: Scalar>(row: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (j, &x) in row.iter().enumerate() {
        let e = if keep(j) { (x - max).exp() } else { T::zero() };
        out[j] = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            param_filter: None,
            overrides: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Restricts which named parameters receive gradients.
    pub fn set_param_filter(&mut self, filter: impl Fn(&str) -> bool + 'static) {
        self.param_filter = Some(Rc::new(filter));
    }

    /// Makes the next binding of `name` use `value` at full precision
    /// instead of widening the stored `f32` tensor. Used for finite
    /// differences in `f64`.
    pub fn override_param(&mut self, name: &str, value: Tensor<T>) {
        self.overrides.insert(name.to_string(), value);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. `requires_grad` is ignored on inference graphs.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same leaf, so gradients from every use are summed.
    pub fn param(&mut self, name: &str, value: &Tensor<f32>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = self.param_filter.as_ref().map_or(true, |f| f(name));
        let value = self.overrides.remove(name).unwrap_or_else(|| value.cast());
        let v = self.leaf(value, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2("transpose", x)?;
        let t = self.value(x).transpose2();
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., n] + row[n]`, broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).numel() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&a, &b)| a + b))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kk = c::<T>(k);
        let t = self.value(x).map(|v| v * kk);
        self.push(t, Op::Scale(x, k), &[x])
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * k);
        Ok(self.push(t, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None).expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis where `mask[i * cols + j] == false` forces
    /// weight zero. Every row must keep at least one position.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if let Some(m) = mask {
            if m.len() != vx.numel() {
                return Err(TensorError::Shape {
                    op: "softmax",
                    lhs: vx.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            if let Some(r) = m.chunks(n.max(1)).position(|row| !row.iter().any(|&k| k)) {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("row {r} has every position masked"),
                });
            }
        }
        let mut out = vec![T::zero(); vx.numel()];
        for (i, (row, o)) in vx.data().chunks(n.max(1)).zip(out.chunks_mut(n.max(1))).enumerate() {
            softmax_row(row, mask.map(|m| &m[i * n..(i + 1) * n]), o);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Softmax along `axis` of a matrix.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis + 1 == rank {
            return Ok(self.softmax_last(x));
        }
        if rank == 2 && axis == 0 {
            let t = self.transpose(x)?;
            let s = self.softmax_last(t);
            return self.transpose(s);
        }
        Err(TensorError::Invalid {
            op: "softmax",
            msg: format!("axis {axis} unsupported for rank {rank}"),
        })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n, V]`, skipping rows whose target is `ignore`. A batch with
    /// nothing to score yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, ignore, false)
    }

    /// [`Graph::cross_entropy`] with every reduction summed in sorted order,
    /// so the value is bit-identical under any permutation of rows or of
    /// positions within a row.
    pub fn cross_entropy_sorted(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, ignore, true)
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: &[usize], ignore: usize, sorted: bool) -> Result<Var> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= v) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut row_losses = Vec::with_capacity(n);
        let mut exps = Vec::with_capacity(v);
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let row = &lv.data()[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            exps.clear();
            exps.extend(row.iter().map(|&x| (x - max).exp()));
            if sorted {
                exps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            }
            let lse = exps.iter().copied().sum::<T>().ln() + max;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            row_losses.push(lse - row[t]);
        }
        if sorted {
            row_losses.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        }
        let count = row_losses.len();
        let total: T = row_losses.iter().copied().sum();
        let loss = if count == 0 {
            T::zero()
        } else {
            total / c::<T>(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean per-element binary cross-entropy of sigmoid(logits) against
    /// `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(logits), targets.shape())?;
        let lv = self.value(logits);
        let n = lv.numel().max(1);
        let total: T = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let loss = total / c::<T>(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Normalizes each row to zero mean and unit variance (eps 1e-5), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let n = vx.cols();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "empty last axis".into(),
            });
        }
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut out = vec![T::zero(); vx.numel()];
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let nn = c::<T>(n as f64);
        for i in 0..rows {
            let row = &vx.data()[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + c::<T>(EPS)).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&vx.data()[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2("concat_rows", parts[0])?.1;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2("concat_rows", p)?;
            if pn != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            m += pm;
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Applies a sparse row map. A row with no entries is all zeros.
    pub fn row_combine(&mut self, x: Var, plan: RowPlan) -> Result<Var> {
        let (m, n) = self.dims2("row_combine", x)?;
        let vx = self.value(x);
        let mut data = vec![T::zero(); plan.rows.len() * n];
        for (i, entries) in plan.rows.iter().enumerate() {
            let orow = &mut data[i * n..(i + 1) * n];
            for &(j, w) in entries {
                if j >= m {
                    return Err(TensorError::Index {
                        op: "row_combine",
                        index: j,
                        size: m,
                    });
                }
                let w = c::<T>(w);
                for (o, &v) in orow.iter_mut().zip(&vx.data()[j * n..(j + 1) * n]) {
                    *o = *o + w * v;
                }
            }
        }
        let t = Tensor::new(vec![plan.rows.len(), n], data)?;
        Ok(self.push(
            t,
            Op::RowCombine {
                x,
                plan: Rc::new(plan),
            },
            &[x],
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.row_combine(table, RowPlan::gather(ids))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Scales each row to unit L2 norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vec![T::zero(); vx.numel()];
        for (i, row) in vx.data().chunks(n.max(1)).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() || !norm.is_finite() {
                return Err(TensorError::ZeroNorm {
                    op: "l2_normalize_rows",
                    row: i,
                });
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reverse pass from a one-element `loss`. Visits each node once, in
    /// reverse creation order, summing gradient contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must have one element, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let da = matmul_nt(dy, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(self.value(*a).data(), dy, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, gy.transpose2()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = dy.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                let db = dy.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gy.clone());
                if self.requires_grad(*row) {
                    let n = gy.cols();
                    let mut dr = vec![T::zero(); n];
                    for chunk in dy.chunks(n.max(1)) {
                        for (d, &g) in dr.iter_mut().zip(chunk) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(self.shape(*row).to_vec(), dr)?);
                }
            }
            Op::Scale(x, k) => {
                let kk = c::<T>(*k);
                self.accumulate(grads, *x, gy.map(|v| v * kk));
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).data()[0];
                self.accumulate(grads, *x, gy.map(|v| v * k));
                if self.requires_grad(*s) {
                    let ds: T = dy.iter().zip(self.value(*x).data()).map(|(&g, &v)| g * v).sum();
                    self.accumulate(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![ds])?);
                }
            }
            Op::Exp(x) => {
                let d = dy.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let d = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols().max(1);
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), d)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = dy[0] / c::<T>(*count as f64);
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            d[i * v + j] = probs[i * v + j] * scale;
                        }
                        d[i * v + t] = d[i * v + t] - scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = dy[0] / c::<T>(lv.numel().max(1) as f64);
                let d = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (T::one() / (T::one() + (-x).exp()) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let nn = c::<T>(n as f64);
                let g = self.value(*gain).data();
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for (i, &r) in rstd.iter().enumerate() {
                    let gr = &dy[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * g[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                        dg[j] = dg[j] + gr[j] * hr[j];
                        db[j] = db[j] + gr[j];
                    }
                    mean_dh = mean_dh / nn;
                    mean_dh_h = mean_dh_h / nn;
                    for j in 0..n {
                        let dh = gr[j] * g[j];
                        dx[i * n + j] = r * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
                self.accumulate(grads, *gain, Tensor::new(self.shape(*gain).to_vec(), dg)?);
                self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = gy.cols();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], d)?);
            }
            Op::ConcatCols(parts) => {
                let m = gy.rows();
                let total = gy.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![m, w], d)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        let d = dy[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::RowCombine { x, plan } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut d = vec![T::zero(); m * n];
                for (i, entries) in plan.rows.iter().enumerate() {
                    let grow = &dy[i * n..(i + 1) * n];
                    for &(j, w) in entries {
                        let w = c::<T>(w);
                        for (o, &g) in d[j * n..(j + 1) * n].iter_mut().zip(grow) {
                            *o = *o + w * g;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], d)?);
            }
            Op::SumAll(x) => {
                let g = dy[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols().max(1);
                let mut d = vec![T::zero(); y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &dy[i * n..(i + 1) * n];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::Reshape(x) => {
                let t = gy.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, t);
            }
        }
        Ok(())
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.wrt(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Name → node map of bound parameters (for tests and diagnostics).
    pub fn param_vars(&self) -> HashMap<String, Var> {
        self.params.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }
}
