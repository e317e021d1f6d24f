use crate::error::{Error, Result};
use crate::params::Scope;
use crate::tensor::{Graph, Real, TensorError, Var};

use super::{BlockConfig, Mode};

/// Which (query, key) pairs may attend, row-major over `rows × cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Entry `(i, j)` permitted iff `j <= i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len)
            .flat_map(|i| (0..len).map(move |j| j <= i))
            .collect();
        Self {
            rows: len,
            cols: len,
            allowed,
        }
    }

    /// Every query row may attend to exactly the valid keys.
    pub fn keys(rows: usize, key_valid: &[bool]) -> Self {
        let allowed = (0..rows).flat_map(|_| key_valid.iter().copied()).collect();
        Self {
            rows,
            cols: key_valid.len(),
            allowed,
        }
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(TensorError::ShapeMismatch {
                op: "mask_and",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            }
            .into());
        }
        let allowed = self
            .allowed
            .iter()
            .zip(&other.allowed)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            allowed,
        })
    }

    pub fn permits(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

pub fn causal_mask(len: usize) -> AttentionMask {
    AttentionMask::causal(len)
}

/// Attention output together with the (post-mask, post-softmax) weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q·Kᵀ/√d_k)·V` with optional masking.
pub fn scaled_dot_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Attended> {
    attend(g, q, k, v, mask, &mut Mode::Eval, 0.0)
}

fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    mode: &mut Mode<'_>,
    dropout: f64,
) -> Result<Attended> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: sq,
            right: sk,
        }
        .into());
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (sq[1] as f64).sqrt()));
    let weights = match mask {
        Some(m) => {
            if (m.rows, m.cols) != (sq[0], sk[0]) {
                return Err(TensorError::ShapeMismatch {
                    op: "attention_mask",
                    left: vec![sq[0], sk[0]],
                    right: vec![m.rows, m.cols],
                }
                .into());
            }
            g.masked_softmax(scores, &m.allowed)?
        }
        None => g.softmax(scores, 1)?,
    };
    let dropped = mode.dropout(g, weights, dropout);
    let output = g.matmul(dropped, v)?;
    Ok(Attended { output, weights })
}

/// Multi-head attention output with per-head weight matrices.
#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Projects queries, keys and values with `wq`, `wk`, `wv`, runs scaled
/// dot-product attention per head on column slices, concatenates the heads
/// and applies `wo`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    cfg: &BlockConfig,
    p: &Scope<'_>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<&AttentionMask>,
    mode: &mut Mode<'_>,
) -> Result<MultiHeadOutput> {
    if g.shape(k_in)[0] != g.shape(v_in)[0] {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            left: g.shape(k_in).to_vec(),
            right: g.shape(v_in).to_vec(),
        }
        .into());
    }
    let d = cfg.d_model;
    if g.shape(q_in).get(1) != Some(&d) {
        return Err(Error::WidthMismatch {
            expected: d,
            got: g.shape(q_in).get(1).copied().unwrap_or(0),
        });
    }
    let q = g.matmul(q_in, p.var("wq"))?;
    let k = g.matmul(k_in, p.var("wk"))?;
    let v = g.matmul(v_in, p.var("wv"))?;
    let dk = cfg.d_k();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk)?,
                g.slice_cols(k, h * dk, dk)?,
                g.slice_cols(v, h * dk, dk)?,
            )
        };
        let a = attend(g, qh, kh, vh, mask, mode, cfg.dropout)?;
        heads.push(a.output);
        weights.push(a.weights);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let output = g.matmul(merged, p.var("wo"))?;
    Ok(MultiHeadOutput { output, weights })
}
