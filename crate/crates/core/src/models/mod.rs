//! Mini language models: a bidirectional encoder pooled at `[CLS]`, a causal
//! decoder pooled at `[EOS]`, an encoder-decoder, and linear heads.
//!
//! Parameter names inside a model are fixed: `emb.*` for embeddings,
//! `enc.<i>.*` and `dec.<i>.*` for layers, `mlm.bias`/`lm.bias` for the
//! output biases of the tied language-model projections.

mod checkpoint;

pub use checkpoint::{load_checkpoint, payload_path, save_checkpoint, CheckpointEntry};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_tokens, BOS, CLS, EOS, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::nn::{
    decoder_layer, embed, encoder_layer, init_decoder_layer, init_embeddings, init_encoder_layer,
    init_linear, linear, seeded_rng, BlockConfig, CrossInput, Mode, Rng64,
};
use crate::params::{ParamSet, Scope};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Encoder,
    Decoder,
    EncoderDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub block: BlockConfig,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_labels: usize,
}

impl ModelSpec {
    /// Two layers of the default block over five section labels.
    pub fn new(kind: ModelKind, vocab_size: usize) -> Self {
        Self {
            kind,
            block: BlockConfig::default(),
            vocab_size,
            n_layers: 2,
            n_labels: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.n_layers == 0 || self.vocab_size <= EOS as usize || self.n_labels == 0 {
            return Err(Error::Config(format!(
                "model needs layers, labels and a vocabulary beyond the reserved ids: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = seeded_rng(seed);
        let mut p = ParamSet::new();
        let b = &self.block;
        init_embeddings(&mut p, "emb", self.vocab_size, b, &mut rng);
        if self.kind != ModelKind::Decoder {
            for i in 0..self.n_layers {
                init_encoder_layer(&mut p, &format!("enc.{i}"), b, &mut rng);
            }
        }
        if self.kind != ModelKind::Encoder {
            let cross = self.kind == ModelKind::EncoderDecoder;
            for i in 0..self.n_layers {
                init_decoder_layer(&mut p, &format!("dec.{i}"), b, cross, &mut rng);
            }
        }
        let bias = if self.kind == ModelKind::Encoder {
            "mlm.bias"
        } else {
            "lm.bias"
        };
        p.insert(bias, Tensor::zeros(&[self.vocab_size]));
        p
    }

    fn expect(&self, kinds: &[ModelKind], what: &str) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} is not defined for a {:?} model", self.kind)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    EncoderCls,
    DecoderEos,
}

/// Hidden states of one sequence with its pooled `[1 × d_model]` row.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub states: Var,
    pub pooled: Var,
    pub pool_index: usize,
    pub source: PoolSource,
}

/// A detached sentence vector, `B(s)` or `G(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding<T: Real> {
    pub vector: Tensor<T>,
    pub source: PoolSource,
    pub sentence_id: Option<String>,
}

/// Length of `ids` without trailing padding.
pub fn content_len(ids: &[u32]) -> usize {
    ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1)
}

pub fn trim_padding(ids: &[u32]) -> &[u32] {
    &ids[..content_len(ids)]
}

fn key_valid(ids: &[u32]) -> Option<Vec<bool>> {
    if ids.contains(&PAD) {
        Some(ids.iter().map(|&i| i != PAD).collect())
    } else {
        None
    }
}

/// Encoder layers over `ids`, with padding keys masked.
pub fn encoder_states<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut x = embed(g, &p.sub("emb"), ids)?;
    let valid = key_valid(ids);
    for i in 0..spec.n_layers {
        x = encoder_layer(
            g,
            &spec.block,
            &p.sub(&format!("enc.{i}")),
            x,
            valid.as_deref(),
            mode,
        )?;
    }
    Ok(x)
}

/// Causal decoder layers over `ids`, optionally cross-attending to `cross`.
pub fn decoder_states<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    cross: Option<CrossInput<'_>>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut x = embed(g, &p.sub("emb"), ids)?;
    for i in 0..spec.n_layers {
        x = decoder_layer(g, &spec.block, &p.sub(&format!("dec.{i}")), x, cross, mode)?;
    }
    Ok(x)
}

/// Index of `[EOS]` as the last non-pad token.
fn eos_index(ids: &[u32]) -> Result<usize> {
    match content_len(ids) {
        0 => Err(Error::EmptySequence),
        n if ids[n - 1] == EOS => Ok(n - 1),
        _ => Err(Error::MissingSpecial("end with [EOS]")),
    }
}

/// Encoder states of `[CLS] w… [SEP] (pad…)`, pooled at `[CLS]`.
pub fn bert_encode<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    mode: &mut Mode<'_>,
) -> Result<Encoded> {
    spec.expect(&[ModelKind::Encoder], "bert_encode")?;
    let n = content_len(ids);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if ids[0] != CLS {
        return Err(Error::MissingSpecial("begin with [CLS]"));
    }
    if ids[n - 1] != SEP {
        return Err(Error::MissingSpecial("end with [SEP]"));
    }
    let states = encoder_states(g, spec, p, ids, mode)?;
    let pooled = g.select_rows(states, &[0])?;
    Ok(Encoded {
        states,
        pooled,
        pool_index: 0,
        source: PoolSource::EncoderCls,
    })
}

/// Decoder states of `[BOS] w… [EOS]`, pooled at `[EOS]`. Anything after
/// `[EOS]` is padding and is not computed.
pub fn gpt_encode<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    mode: &mut Mode<'_>,
) -> Result<Encoded> {
    spec.expect(&[ModelKind::Decoder], "gpt_encode")?;
    let eos = eos_index(ids)?;
    let states = decoder_states(g, spec, p, &ids[..=eos], None, mode)?;
    let pooled = g.select_rows(states, &[eos])?;
    Ok(Encoded {
        states,
        pooled,
        pool_index: eos,
        source: PoolSource::DecoderEos,
    })
}

/// Decoder pass over `ids` attending to an explicit encoder memory.
pub fn encdec_decode<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    memory: Var,
    mode: &mut Mode<'_>,
) -> Result<Encoded> {
    spec.expect(&[ModelKind::EncoderDecoder], "encdec_decode")?;
    let eos = eos_index(ids)?;
    let cross = CrossInput {
        memory,
        memory_valid: None,
    };
    let states = decoder_states(g, spec, p, &ids[..=eos], Some(cross), mode)?;
    let pooled = g.select_rows(states, &[eos])?;
    Ok(Encoded {
        states,
        pooled,
        pool_index: eos,
        source: PoolSource::DecoderEos,
    })
}

/// The same decoder-style sequence goes through the encoder and, as
/// memory-conditioned input, the decoder; pooled at the decoder `[EOS]`.
pub fn encdec_encode<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    mode: &mut Mode<'_>,
) -> Result<Encoded> {
    spec.expect(&[ModelKind::EncoderDecoder], "encdec_encode")?;
    let eos = eos_index(ids)?;
    let memory = encoder_states(g, spec, p, &ids[..=eos], mode)?;
    encdec_decode(g, spec, p, ids, memory, mode)
}

/// Pooled sentence vector for whichever family `spec` describes.
pub fn encode_pooled<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    ids: &[u32],
    mode: &mut Mode<'_>,
) -> Result<Encoded> {
    match spec.kind {
        ModelKind::Encoder => bert_encode(g, spec, p, ids, mode),
        ModelKind::Decoder => gpt_encode(g, spec, p, ids, mode),
        ModelKind::EncoderDecoder => encdec_encode(g, spec, p, ids, mode),
    }
}

/// Evaluation-mode pooled embedding, detached from any graph.
pub fn pooled_embedding<T: Real>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    ids: &[u32],
    sentence_id: Option<String>,
) -> Result<PooledEmbedding<T>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let e = encode_pooled(&mut g, spec, &b.root(), ids, &mut Mode::Eval)?;
    let d = spec.block.d_model;
    Ok(PooledEmbedding {
        vector: g.value(e.pooled).clone().reshape(&[d])?,
        source: e.source,
        sentence_id,
    })
}

/// Tied output projection `h·Eᵀ + bias`.
fn lm_logits<T: Real>(g: &mut Graph<T>, p: &Scope<'_>, h: Var, bias: &str) -> Result<Var> {
    let logits = g.matmul_nt(h, p.var("emb.tok_emb"))?;
    Ok(g.add_row(logits, p.var(bias))?)
}

fn maskable(id: u32) -> bool {
    id as usize >= crate::corpus::NUM_SPECIALS
}

/// Masks each sequence at `rate`; if nothing got masked, one maskable token
/// of the batch is forced so the step still has a target.
fn mask_batch(batch: &[&[u32]], rate: f64, rng: &mut Rng64) -> Result<Vec<Vec<u32>>> {
    let mut masked: Vec<Vec<u32>> = batch.iter().map(|s| mask_tokens(s, rate, rng)).collect();
    let any = masked.iter().flatten().any(|&i| i == MASK);
    if !any {
        let candidates: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .flat_map(|(b, s)| {
                s.iter()
                    .enumerate()
                    .filter(|(_, &id)| maskable(id))
                    .map(move |(i, _)| (b, i))
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::NothingToMask);
        }
        let (b, i) = candidates[rng.random_range(0..candidates.len())];
        masked[b][i] = MASK;
    }
    Ok(masked)
}

/// Masked-token cross-entropy over a batch of encoder-style sequences.
pub fn mlm_step<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    batch: &[Vec<u32>],
    mask_rate: f64,
    rng: &mut Rng64,
) -> Result<Var> {
    spec.expect(&[ModelKind::Encoder], "mlm_step")?;
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    let seqs: Vec<&[u32]> = batch.iter().map(|s| trim_padding(s)).collect();
    let masked = mask_batch(&seqs, mask_rate, rng)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (orig, inp) in seqs.iter().zip(&masked) {
        let pos: Vec<usize> = (0..inp.len()).filter(|&i| inp[i] == MASK && orig[i] != MASK).collect();
        if pos.is_empty() {
            continue;
        }
        let states = encoder_states(g, spec, p, inp, &mut Mode::Train(rng))?;
        rows.push(g.select_rows(states, &pos)?);
        targets.extend(pos.iter().map(|&i| orig[i] as usize));
    }
    let h = g.concat_rows(&rows)?;
    let logits = lm_logits(g, p, h, "mlm.bias")?;
    Ok(g.cross_entropy(logits, &targets)?)
}

fn next_token_split(ids: &[u32]) -> Result<(&[u32], Vec<usize>)> {
    let s = trim_padding(ids);
    if s.len() < 2 {
        return Err(Error::SequenceTooShort { len: s.len() });
    }
    Ok((&s[..s.len() - 1], s[1..].iter().map(|&i| i as usize).collect()))
}

/// Next-token cross-entropy over a batch of decoder-style sequences.
pub fn clm_step<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    batch: &[Vec<u32>],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    spec.expect(&[ModelKind::Decoder], "clm_step")?;
    if batch.is_empty() {
        return Err(Error::NoExamples);
    }
    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for ids in batch {
        let (inp, tgt) = next_token_split(ids)?;
        rows.push(decoder_states(g, spec, p, inp, None, mode)?);
        targets.extend(tgt);
    }
    let h = g.concat_rows(&rows)?;
    let logits = lm_logits(g, p, h, "lm.bias")?;
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Denoising objective for the encoder-decoder: the encoder reads a masked
/// copy of each sequence, the decoder reconstructs it token by token.
pub fn denoise_step<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    p: &Scope<'_>,
    batch: &[Vec<u32>],
    mask_rate: f64,
    rng: &mut Rng64,
) -> Result<Var> {
    spec.expect(&[ModelKind::EncoderDecoder], "denoise_step")?;
    if batch.is_empty() {
        return Err(Error::NoExamples);
    }
    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for ids in batch {
        let (inp, tgt) = next_token_split(ids)?;
        let full = trim_padding(ids);
        let noisy = mask_tokens(full, mask_rate, rng);
        let memory = encoder_states(g, spec, p, &noisy, &mut Mode::Train(rng))?;
        let cross = CrossInput {
            memory,
            memory_valid: None,
        };
        rows.push(decoder_states(g, spec, p, inp, Some(cross), &mut Mode::Train(rng))?);
        targets.extend(tgt);
    }
    let h = g.concat_rows(&rows)?;
    let logits = lm_logits(g, p, h, "lm.bias")?;
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Tokens generation never emits: everything reserved except `[UNK]` and `[EOS]`.
fn generable(id: usize) -> bool {
    !matches!(id as u32, PAD | CLS | SEP | MASK | BOS)
}

/// Greedy continuation of `prefix` by up to `n_new` tokens, stopping after
/// `[EOS]` or at the maximum length. Returns prefix plus generated ids.
pub fn generate<T: Real>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    prefix: &[u32],
    n_new: usize,
) -> Result<Vec<u32>> {
    spec.expect(&[ModelKind::Decoder], "generate")?;
    if prefix.is_empty() {
        return Err(Error::EmptySequence);
    }
    if n_new == 0 {
        return Err(Error::Config("n_new must be at least 1".into()));
    }
    let max = spec.block.max_len;
    if prefix.len() > max {
        return Err(Error::SequenceTooLong {
            len: prefix.len(),
            max,
        });
    }
    let mut ids = prefix.to_vec();
    for _ in 0..n_new {
        if ids.len() >= max {
            break;
        }
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let p = b.root();
        let states = decoder_states(&mut g, spec, &p, &ids, None, &mut Mode::Eval)?;
        let last = g.select_rows(states, &[ids.len() - 1])?;
        let logits = lm_logits(&mut g, &p, last, "lm.bias")?;
        let row = g.value(logits).data();
        let next = argmax_where(row, generable);
        ids.push(next as u32);
        if next as u32 == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Linear classification head over a feature width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub input_width: usize,
    pub n_labels: usize,
}

impl ClassifierHead {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, p: &mut ParamSet<T>, prefix: &str, rng: &mut R) {
        init_linear(p, prefix, self.input_width, self.n_labels, rng);
    }
}

/// Logits `features·w + b` for `[n × width]` features.
pub fn classify<T: Real>(g: &mut Graph<T>, head: &Scope<'_>, features: Var) -> Result<Var> {
    let w = head.var("w");
    let expected = g.shape(w)[0];
    let got = g.shape(features).get(1).copied().unwrap_or(0);
    if got != expected {
        return Err(Error::WidthMismatch { expected, got });
    }
    linear(g, head, features)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    argmax_where(row, |_| true)
}

fn argmax_where<T: Real>(row: &[T], keep: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in row.iter().enumerate() {
        if keep(i) && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}
