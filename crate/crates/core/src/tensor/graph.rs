use std::sync::Arc;

use rand::Rng;

use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { x: Var, bias: Var },
    Tanh(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
    Cosine(Var, Var),
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::Cosine(..) => "cosine_embedding",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-8;

fn dims2(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.push_shared(Arc::new(value), op, tracked)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A gradient-tracking leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.push_shared(value.into(), Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.push_shared(value.into(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Detached copy of `v`: same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(value, Op::Leaf, false)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. Both operands are rank 2, or both rank 3 with the same
    /// leading batch extent.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return Err(mismatch());
                }
                (None, *m, *k, n)
            }
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return Err(mismatch());
                }
                (Some(*ba), *m, *k, n)
            }
            _ => return Err(mismatch()),
        };
        let count = batch.unwrap_or(1);
        let mut out = vec![T::zero(); count * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let b_strides = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            for i in 0..count {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    b_strides,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let shape = match batch {
            Some(bt) => vec![bt, m, n],
            None => vec![m, n],
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, trans_b },
            tracked,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, tracked))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(shape, data), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu_value)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2("add_row", self.value(x))?;
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks_exact(n) {
            out.extend(row.iter().zip(bv).map(|(&a, &b)| a + b));
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::AddRow { x, bias },
            tracked,
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, tracked)
    }

    // ---- normalisation and probabilities -------------------------------

    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "softmax",
                index: axis,
                extent: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, tracked))
    }

    /// Row-wise softmax of an `m×n` matrix restricted to the entries where
    /// `allowed` (row-major, `m·n` flags) is true. Disallowed entries are
    /// exactly zero in the output.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = dims2("masked_softmax", self.value(x))?;
        if allowed.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![m, n],
                right: vec![allowed.len()],
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let ok = &allowed[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(TensorError::FullyMasked { row: r });
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = T::zero();
            for j in 0..n {
                if ok[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MaskedSoftmax(x), tracked))
    }

    /// Layer normalisation over the last axis of an `m×n` matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (m, n) = dims2("layer_norm", self.value(x))?;
        for p in [gain, shift] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(LN_EPS);
        let nf = T::count(n);
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + sv[j]);
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(shift);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    // ---- losses and reductions -----------------------------------------

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = dims2("cross_entropy", self.value(logits))?;
        if targets.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![b, c],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = T::zero();
        for (row, &t) in lv.chunks_exact(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        loss /= T::count(b);
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = T::count(av.len());
        let loss = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "mse" });
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), tracked))
    }

    /// Mean over rows of `1 - cos(a_i, b_i)` (cosine embedding loss with a
    /// positive target).
    pub fn cosine_embedding(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_embedding", a, b)?;
        let (m, n) = dims2("cosine_embedding", self.value(a))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut loss = T::zero();
        for i in 0..m {
            let (ra, rb) = (&av[i * n..(i + 1) * n], &bv[i * n..(i + 1) * n]);
            loss += T::one() - cosine_parts(ra, rb).0;
        }
        loss /= T::count(m);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(loss), Op::Cosine(a, b), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::count(v.len());
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    // ---- indexing and layout -------------------------------------------

    /// Embedding lookup: row `ids[i]` of a `V×d` table becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("gather", self.value(table))?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, d],
                len: 0,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                extent: v,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Selects rows of an `m×n` matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, _) = dims2("select_rows", self.value(x))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_rows",
                index: bad,
                extent: m,
            });
        }
        let out = self.gather_rows_value(x, rows);
        let tracked = self.tracked(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    fn gather_rows_value(&self, x: Var, rows: &[usize]) -> Tensor<T> {
        let v = self.value(x);
        let n = v.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(v.row(r));
        }
        Tensor::from_parts(vec![rows.len(), n], out)
    }

    /// Columns `start..start+len` of an `m×n` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.value(x))?;
        if len == 0 || start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in xv.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start },
            tracked,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| dims2("concat_cols", self.value(p)))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(m, _)) = dims.first() else {
            return Err(TensorError::InvalidShape {
                shape: vec![],
                len: 0,
            });
        };
        if let Some(&(bad, _)) = dims.iter().find(|(r, _)| *r != m) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: vec![m],
                right: vec![bad],
            });
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| dims2("concat_rows", self.value(p)))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(_, n)) = dims.first() else {
            return Err(TensorError::InvalidShape {
                shape: vec![],
                len: 0,
            });
        };
        if let Some(&(_, bad)) = dims.iter().find(|(_, c)| *c != n) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: vec![n],
                right: vec![bad],
            });
        }
        let total: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![total, n], out),
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradients of `loss` with respect to every tracked node that
    /// it depends on. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = &self.nodes[loss.0].value;
        if value.len() != 1 {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        if !self.tracked(loss) {
            return Err(TensorError::Detached);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.tracked {
                if gout.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: node.op.name() });
                }
                propagate(&self.nodes, &mut self.grads, i, &gout);
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn gelu_value<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// (cos, |a|, |b|, a·b) with norms clamped away from zero.
fn cosine_parts<T: Real>(a: &[T], b: &[T]) -> (T, T, T, T) {
    let eps = T::from_f64(COS_EPS);
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    (dot / (na * nb), na, nb, dot)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradient buffer for `v`, zero-initialised on first use. `None` when `v`
/// is not tracked.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn propagate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (count, m, k) = match sa {
                [m, k] => (1, *m, *k),
                [bt, m, k] => (*bt, *m, *k),
                _ => unreachable!(),
            };
            let n = if *trans_b {
                sb[sb.len() - 2]
            } else {
                sb[sb.len() - 1]
            };
            let (av, bv) = (val(*a), val(*b));
            let (ki, ni) = (k as isize, n as isize);
            if let Some(ga) = slot(nodes, grads, *a) {
                for t in 0..count {
                    let gs = &g[t * m * n..(t + 1) * m * n];
                    let bs = &bv[t * k * n..(t + 1) * k * n];
                    let dst = &mut ga[t * m * k..(t + 1) * m * k];
                    // dA = dC·Bᵀ, or dC·B when B was stored transposed.
                    let b_strides = if *trans_b { (ki, 1) } else { (1, ni) };
                    T::gemm(m, n, k, T::one(), gs, (ni, 1), bs, b_strides, T::one(), dst, (ki, 1));
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for t in 0..count {
                    let gs = &g[t * m * n..(t + 1) * m * n];
                    let as_ = &av[t * m * k..(t + 1) * m * k];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // dB(n×k) = dCᵀ·A
                        T::gemm(n, m, k, T::one(), gs, (1, ni), as_, (ki, 1), T::one(), dst, (ki, 1));
                    } else {
                        // dB(k×n) = Aᵀ·dC
                        T::gemm(k, m, n, T::one(), as_, (1, ki), gs, (ni, 1), T::one(), dst, (ni, 1));
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                if let Some(ga) = slot(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                if let Some(ga) = slot(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *f);
            }
        }
        Op::AddRow { x, bias } => {
            let n = nodes[bias.0].value.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * (T::one() - out[j] * out[j]);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_derivative(xv[j]);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let shape = nodes[x.0].value.shape();
            let (outer, len, inner) = axis_split(shape, *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i2 in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i2;
                        let dot: T = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            let n = nodes[x.0].value.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dst, grow), yrow) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.chunks_exact(n))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dst[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[logits.0].value.shape()[1];
            let scale = g[0] / T::count(targets.len());
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let k = T::from_f64(2.0) * g[0] / T::count(av.len());
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..av.len() {
                    ga[j] += k * (av[j] - bv[j]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for j in 0..av.len() {
                    gb[j] -= k * (av[j] - bv[j]);
                }
            }
        }
        Op::Cosine(a, b) => {
            let n = nodes[a.0].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            let rows = av.len() / n;
            let scale = g[0] / T::count(rows);
            for r in 0..rows {
                let (ra, rb) = (&av[r * n..(r + 1) * n], &bv[r * n..(r + 1) * n]);
                let (cos, na, nb, _) = cosine_parts(ra, rb);
                // d(1 - cos)/da = -(b/(|a||b|) - cos·a/|a|²)
                if let Some(ga) = slot(nodes, grads, *a) {
                    for j in 0..n {
                        ga[r * n + j] -= scale * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for j in 0..n {
                        gb[r * n + j] -= scale * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let k = g[0] / T::count(gx.len());
                gx.iter_mut().for_each(|d| *d += k);
            }
        }
        Op::Gather { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let n = nodes[x.0].value.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &src) in rows.iter().enumerate() {
                    gx[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::SliceCols { x, start } => {
            let n = nodes[x.0].value.shape()[1];
            let len = nodes[i].value.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (dst, src) in gx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                    dst[*start..*start + len]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[i].value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape()[1];
                if let Some(gp) = slot(nodes, grads, p) {
                    for (dst, src) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                        dst.iter_mut()
                            .zip(&src[offset..offset + w])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(a, &b)| *a += b);
                }
                offset += len;
            }
        }
        Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            rstd,
        } => {
            let n = nodes[gain.0].value.len();
            let gv = val(*gain);
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gs) = slot(nodes, grads, *shift) {
                for grow in g.chunks_exact(n) {
                    gs.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let nf = T::count(n);
                for (r, ((dst, grow), hrow)) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(xhat.chunks_exact(n))
                    .enumerate()
                {
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in 0..n {
                        let dh = grow[j] * gv[j];
                        sum_d += dh;
                        sum_dh += dh * hrow[j];
                    }
                    let k = rstd[r] / nf;
                    for j in 0..n {
                        let dh = grow[j] * gv[j];
                        dst[j] += k * (nf * dh - sum_d - hrow[j] * sum_dh);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::<f64>::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2, 1], &[1., 1., 2., 0.5]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3., 8.]);
    }

    #[test]
    fn matmul_nt_equals_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[2, 3], &[1., 0., -1., 2., 1., 0.]));
        let bt = g.constant(t(&[3, 2], &[1., 2., 0., 1., -1., 0.]));
        let x = g.matmul_nt(a, b).unwrap();
        let y = g.matmul(a, bt).unwrap();
        assert_eq!(g.value(x).data(), g.value(y).data());
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let z = g.constant(t(&[1], &[0.]));
        let th = g.tanh(z);
        assert_eq!(g.value(th).data(), &[0.]);
        let c = g.constant(t(&[3], &[1., 2., 3.]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[0., 0.]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let big = g.constant(t(&[2], &[1000., 1000.]));
        let s = g.softmax(big, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        assert!(g.softmax(big, 1).is_err());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let s = g.softmax(x, 0).unwrap();
        let denom: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (j, &v) in g.value(s).data().iter().enumerate() {
            let expected = ((j + 1) as f64).exp() / denom;
            assert!((v - expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_on_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0., 1., 0., 3.]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_rejects_empty_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[5., 1., 2., 2.]));
        let s = g.masked_softmax(x, &[false, true, true, true]).unwrap();
        assert_eq!(g.value(s).data(), &[0., 1., 0.5, 0.5]);
        let err = g.masked_softmax(x, &[true, true, false, false]).unwrap_err();
        assert_eq!(err, TensorError::FullyMasked { row: 1 });
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let l = g.constant(t(&[1, 2], &[10., -10.]));
        let ce = g.cross_entropy(l, &[0]).unwrap();
        assert!(g.value(ce).item() < 1e-4);
        let u = g.constant(t(&[1, 2], &[0., 0.]));
        let ce = g.cross_entropy(u, &[0]).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.cross_entropy(u, &[2]),
            Err(TensorError::IndexOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn mse_reference_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let b = g.constant(t(&[2], &[1., 1.]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 1.0);
        let m = g.mse(a, a).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
        let c = g.constant(t(&[3], &[0., 0., 0.]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert_eq!(g.backward(x), Err(TensorError::NotScalar(vec![2])));
        let c = g.constant(t(&[2], &[1., 2.]));
        let s = g.sum(c);
        assert_eq!(g.backward(s), Err(TensorError::Detached));
    }

    #[test]
    fn backward_twice_does_not_accumulate_across_calls() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3., 4.]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1., 2., 3., 4., -1., 0., 0., 1.]));
        let gain = g.constant(Tensor::ones(&[4]));
        let shift = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.gather(table, &[0, 3]).is_err());
        assert!(g.gather(table, &[]).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let back = g.slice_cols(c, 1, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
        let r = g.concat_rows(&[b, b]).unwrap();
        assert_eq!(g.value(r).shape(), &[4, 2]);
    }
}
