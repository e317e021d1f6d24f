use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamSet, Scope};
use crate::tensor::{Graph, Real, Tensor, Var};

use super::attention::{multi_head_attention, AttentionMask};
use super::{BlockConfig, Mode, INIT_STD};

fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, INIT_STD, rng)
}

pub fn init_embeddings<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    vocab: usize,
    cfg: &BlockConfig,
    rng: &mut R,
) {
    p.insert(format!("{prefix}.tok_emb"), normal(&[vocab, cfg.d_model], rng));
    p.insert(format!("{prefix}.pos_emb"), normal(&[cfg.max_len, cfg.d_model], rng));
}

/// Token plus learned positional embedding, `[len × d_model]`.
pub fn embed<T: Real>(g: &mut Graph<T>, p: &Scope<'_>, ids: &[u32]) -> Result<Var> {
    let tok = p.var("tok_emb");
    let pos = p.var("pos_emb");
    let vocab = g.shape(tok)[0];
    let max_len = g.shape(pos)[0];
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: max_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let t = g.gather(tok, &idx)?;
    let q = g.gather(pos, &positions)?;
    Ok(g.add(t, q)?)
}

pub fn init_linear<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    p.insert(format!("{prefix}.w"), normal(&[d_in, d_out], rng));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

/// `x·w + b`.
pub fn linear<T: Real>(g: &mut Graph<T>, p: &Scope<'_>, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var("w"))?;
    Ok(g.add_row(y, p.var("b"))?)
}

pub fn init_layer_norm<T: Real>(p: &mut ParamSet<T>, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.gain"), Tensor::ones(&[d]));
    p.insert(format!("{prefix}.shift"), Tensor::zeros(&[d]));
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Scope<'_>, x: Var) -> Result<Var> {
    Ok(g.layer_norm(x, p.var("gain"), p.var("shift"))?)
}

pub fn init_attention<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) {
    for name in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("{prefix}.{name}"), normal(&[d, d], rng));
    }
}

pub fn init_feed_forward<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut R,
) {
    p.insert(format!("{prefix}.w1"), normal(&[d, d_ff], rng));
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]));
    p.insert(format!("{prefix}.w2"), normal(&[d_ff, d], rng));
    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
}

/// Position-wise `GELU(x·w1 + b1)·w2 + b2`, with dropout after the activation.
pub fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &BlockConfig,
    p: &Scope<'_>,
    x: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let h = g.matmul(x, p.var("w1"))?;
    let h = g.add_row(h, p.var("b1"))?;
    let h = g.gelu(h);
    let h = mode.dropout(g, h, cfg.dropout);
    let y = g.matmul(h, p.var("w2"))?;
    Ok(g.add_row(y, p.var("b2"))?)
}

pub fn init_encoder_layer<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut R,
) {
    init_attention(p, &format!("{prefix}.attn"), cfg.d_model, rng);
    init_layer_norm(p, &format!("{prefix}.ln1"), cfg.d_model);
    init_feed_forward(p, &format!("{prefix}.ff"), cfg.d_model, cfg.d_ff, rng);
    init_layer_norm(p, &format!("{prefix}.ln2"), cfg.d_model);
}

/// Bidirectional self-attention block. `key_valid` excludes padding keys.
pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    cfg: &BlockConfig,
    p: &Scope<'_>,
    x: Var,
    key_valid: Option<&[bool]>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let len = g.shape(x)[0];
    let mask = key_valid.map(|v| AttentionMask::keys(len, v));
    let a = multi_head_attention(g, cfg, &p.sub("attn"), x, x, x, mask.as_ref(), mode)?;
    let h = g.add(x, a.output)?;
    let h = layer_norm(g, &p.sub("ln1"), h)?;
    let f = feed_forward(g, cfg, &p.sub("ff"), h, mode)?;
    let o = g.add(h, f)?;
    layer_norm(g, &p.sub("ln2"), o)
}

/// Encoder states a decoder layer attends over.
#[derive(Clone, Copy, Debug)]
pub struct CrossInput<'a> {
    pub memory: Var,
    pub memory_valid: Option<&'a [bool]>,
}

pub fn init_decoder_layer<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    cfg: &BlockConfig,
    cross: bool,
    rng: &mut R,
) {
    init_attention(p, &format!("{prefix}.self_attn"), cfg.d_model, rng);
    init_layer_norm(p, &format!("{prefix}.ln1"), cfg.d_model);
    if cross {
        init_attention(p, &format!("{prefix}.cross_attn"), cfg.d_model, rng);
        init_layer_norm(p, &format!("{prefix}.ln_cross"), cfg.d_model);
    }
    init_feed_forward(p, &format!("{prefix}.ff"), cfg.d_model, cfg.d_ff, rng);
    init_layer_norm(p, &format!("{prefix}.ln2"), cfg.d_model);
}

/// Causal self-attention block, optionally followed by cross-attention.
///
/// Inputs must not carry leading padding: row `i` always attends to itself.
pub fn decoder_layer<T: Real>(
    g: &mut Graph<T>,
    cfg: &BlockConfig,
    p: &Scope<'_>,
    x: Var,
    cross: Option<CrossInput<'_>>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let len = g.shape(x)[0];
    let causal = AttentionMask::causal(len);
    let a = multi_head_attention(g, cfg, &p.sub("self_attn"), x, x, x, Some(&causal), mode)?;
    let h = g.add(x, a.output)?;
    let mut h = layer_norm(g, &p.sub("ln1"), h)?;
    if let Some(c) = cross {
        let mask = c.memory_valid.map(|v| AttentionMask::keys(len, v));
        let a = multi_head_attention(
            g,
            cfg,
            &p.sub("cross_attn"),
            h,
            c.memory,
            c.memory,
            mask.as_ref(),
            mode,
        )?;
        let s = g.add(h, a.output)?;
        h = layer_norm(g, &p.sub("ln_cross"), s)?;
    }
    let f = feed_forward(g, cfg, &p.sub("ff"), h, mode)?;
    let o = g.add(h, f)?;
    layer_norm(g, &p.sub("ln2"), o)
}
