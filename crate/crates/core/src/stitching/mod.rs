//! Combinations of an encoder `B` and a decoder `G` for look-ahead
//! classification: Loss Stitching (GBLS), Attention Stitching (GBAS),
//! concatenation (GPT+BERT) and generate-then-classify (BERT(GPT)).
//!
//! A stitched parameter set keeps the encoder under `bert.`, the decoder
//! under `gpt.`, the mapper under `mapper.`, the stitching attention under
//! `gbas.` and the classification head under `head.`.

mod generation;

pub use generation::{pair_sequence, GenerationCache};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_tokens, LasiExample};
use crate::error::{Error, Result};
use crate::models::{
    bert_encode, classify, content_len, decoder_states, encoder_states, gpt_encode, ModelSpec,
};
use crate::nn::{
    init_attention, init_linear, linear, multi_head_attention, AttentionMask, BlockConfig, Mode,
    MultiHeadOutput,
};
use crate::params::{ParamSet, Scope};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchKind {
    Gbls,
    Gbas,
    Concat,
    GenerateClassify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLossKind {
    Mse,
    Cosine,
}

/// Which sentence pair trains the GBLS mapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperPairing {
    /// `G(s_{k-1}) -> B(s_k)`
    NextSentence,
    /// `G(s_{k-2}) -> B(s_{k-1})`
    PreviousSentence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchModelSpec {
    pub aux_loss_weight: f64,
    pub aux_loss_kind: AuxLossKind,
    pub bert_input_mask_rate: f64,
    pub gbas_heads: usize,
    pub mapper_pairing: MapperPairing,
    /// GBAS: also feed `B(s_{k-2})` to the head.
    pub gbas_concat_prev: bool,
    /// GBAS: attend over pooled sentence vectors instead of token states.
    pub gbas_pooled: bool,
    pub gen_tokens: usize,
}

impl Default for StitchModelSpec {
    fn default() -> Self {
        Self {
            aux_loss_weight: 0.05,
            aux_loss_kind: AuxLossKind::Mse,
            bert_input_mask_rate: 0.10,
            gbas_heads: 8,
            mapper_pairing: MapperPairing::NextSentence,
            gbas_concat_prev: false,
            gbas_pooled: false,
            gen_tokens: 50,
        }
    }
}

impl StitchModelSpec {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "aux loss weight {} must be non-negative",
                self.aux_loss_weight
            )));
        }
        if !(0.0..1.0).contains(&self.bert_input_mask_rate) {
            return Err(Error::Config(format!(
                "mask rate {} outside [0, 1)",
                self.bert_input_mask_rate
            )));
        }
        if self.gbas_heads == 0 || d_model % self.gbas_heads != 0 {
            return Err(Error::Config(format!(
                "gbas heads ({}) must divide d_model ({d_model})",
                self.gbas_heads
            )));
        }
        if self.gen_tokens == 0 {
            return Err(Error::Config("gen_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Input width of the classification head for `kind`.
    pub fn head_width(&self, kind: StitchKind, d_model: usize) -> usize {
        match kind {
            StitchKind::Gbls | StitchKind::Concat => 2 * d_model,
            StitchKind::Gbas if self.gbas_concat_prev => 2 * d_model,
            StitchKind::Gbas | StitchKind::GenerateClassify => d_model,
        }
    }
}

pub fn init_mapper<T: Real, R: Rng + ?Sized>(
    p: &mut ParamSet<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    init_linear(p, &format!("{prefix}.l1"), d_in, d_out, rng);
    init_linear(p, &format!("{prefix}.l2"), d_out, d_out, rng);
}

/// `l2(tanh(l1(g)))`, carrying decoder vectors into encoder space.
pub fn mapper_apply<T: Real>(g: &mut Graph<T>, m: &Scope<'_>, x: Var) -> Result<Var> {
    let w = m.var("l1.w");
    let expected = g.shape(w)[0];
    let got = g.shape(x).get(1).copied().unwrap_or(0);
    if got != expected {
        return Err(Error::WidthMismatch { expected, got });
    }
    let h = linear(g, &m.sub("l1"), x)?;
    let h = g.tanh(h);
    linear(g, &m.sub("l2"), h)
}

pub fn init_gbas<T: Real, R: Rng + ?Sized>(p: &mut ParamSet<T>, prefix: &str, d: usize, rng: &mut R) {
    init_attention(p, prefix, d, rng);
}

/// Parameters of a stitched model: pretrained encoder and decoder copies
/// plus freshly initialised mapper or stitching attention and head.
pub fn assemble<T: Real>(
    kind: StitchKind,
    spec: &StitchModelSpec,
    bert: (&ModelSpec, &ParamSet<T>),
    gpt: (&ModelSpec, &ParamSet<T>),
    seed: u64,
) -> Result<ParamSet<T>> {
    let d = bert.0.block.d_model;
    if gpt.0.block.d_model != d {
        return Err(Error::WidthMismatch {
            expected: d,
            got: gpt.0.block.d_model,
        });
    }
    spec.validate(d)?;
    let mut rng = crate::nn::seeded_rng(seed);
    let mut p = ParamSet::new();
    p.absorb("bert", bert.1);
    p.absorb("gpt", gpt.1);
    match kind {
        StitchKind::Gbls => init_mapper(&mut p, "mapper", d, d, &mut rng),
        StitchKind::Gbas => init_gbas(&mut p, "gbas", d, &mut rng),
        StitchKind::Concat | StitchKind::GenerateClassify => {}
    }
    let head = crate::models::ClassifierHead {
        input_width: spec.head_width(kind, d),
        n_labels: bert.0.n_labels,
    };
    head.init(&mut p, "head", &mut rng);
    Ok(p)
}

/// The pieces a stitched forward pass needs.
pub struct Stitch<'a> {
    pub spec: &'a StitchModelSpec,
    pub bert: &'a ModelSpec,
    pub gpt: &'a ModelSpec,
    pub params: Scope<'a>,
}

/// Output of a stitched forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct StitchOutput {
    /// `[batch × labels]`
    pub logits: Var,
    pub loss_cls: Var,
    /// GBLS in training mode only.
    pub loss_aux: Option<Var>,
    pub loss_total: Var,
}

fn context(ex: &LasiExample, offset: i32) -> Result<&crate::corpus::Context> {
    ex.context(offset).ok_or(Error::MissingContext(offset))
}

/// Enforces the look-ahead contract: evaluation never sees `s_k`, training
/// objectives that need it must have it.
fn check_target(ex: &LasiExample, mode: &Mode<'_>, needs_target: bool) -> Result<()> {
    match (mode.is_train(), ex.target.is_some()) {
        (false, true) => Err(Error::TargetInEval),
        (true, false) if needs_target => Err(Error::TargetRequired),
        _ => Ok(()),
    }
}

impl Stitch<'_> {
    fn bert_pooled<T: Real>(&self, g: &mut Graph<T>, ids: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        let n = content_len(ids);
        Ok(bert_encode(g, self.bert, &self.params.sub("bert"), &ids[..n], mode)?.pooled)
    }

    fn gpt_pooled<T: Real>(&self, g: &mut Graph<T>, ids: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        Ok(gpt_encode(g, self.gpt, &self.params.sub("gpt"), ids, mode)?.pooled)
    }

    fn head_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        rows: &[Var],
        batch: &[&LasiExample],
    ) -> Result<(Var, Var)> {
        let features = g.concat_rows(rows)?;
        let logits = classify(g, &self.params.sub("head"), features)?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label.id()).collect();
        let loss = g.cross_entropy(logits, &labels)?;
        Ok((logits, loss))
    }

    /// GBLS. Classification reads `[B(s_{k-1}) ‖ mapper(G(s_{k-1}))]`; in
    /// training the mapper is also pulled towards `B` of the masked target
    /// sentence with weight `aux_loss_weight`.
    pub fn gbls_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &[&LasiExample],
        mode: &mut Mode<'_>,
    ) -> Result<StitchOutput> {
        if batch.is_empty() {
            return Err(Error::NoExamples);
        }
        let train = mode.is_train();
        let mut rows = Vec::with_capacity(batch.len());
        let mut mapped_aux = Vec::new();
        let mut targets_aux = Vec::new();
        for ex in batch {
            let pairing_next = self.spec.mapper_pairing == MapperPairing::NextSentence;
            check_target(ex, mode, train && pairing_next)?;
            let prev = context(ex, -1)?;
            let b = self.bert_pooled(g, &prev.enc, mode)?;
            let gv = self.gpt_pooled(g, &prev.dec, mode)?;
            let mapped = mapper_apply(g, &self.params.sub("mapper"), gv)?;
            rows.push(g.concat_cols(&[b, mapped])?);
            if !train {
                continue;
            }
            let (source, target_ids) = if pairing_next {
                let t = ex.target.as_ref().ok_or(Error::TargetRequired)?;
                (mapped, t.enc.clone())
            } else {
                let before = context(ex, -2)?;
                let gv2 = self.gpt_pooled(g, &before.dec, mode)?;
                (mapper_apply(g, &self.params.sub("mapper"), gv2)?, prev.enc.clone())
            };
            let rate = self.spec.bert_input_mask_rate;
            let masked = match mode.rng() {
                Some(rng) if rate > 0.0 => mask_tokens(&target_ids, rate, rng),
                _ => target_ids,
            };
            let target = self.bert_pooled(g, &masked, mode)?;
            mapped_aux.push(source);
            targets_aux.push(g.detach(target));
        }
        let (logits, loss_cls) = self.head_loss(g, &rows, batch)?;
        if !train {
            return Ok(StitchOutput {
                logits,
                loss_cls,
                loss_aux: None,
                loss_total: loss_cls,
            });
        }
        let a = g.concat_rows(&mapped_aux)?;
        let b = g.concat_rows(&targets_aux)?;
        let loss_aux = match self.spec.aux_loss_kind {
            AuxLossKind::Mse => g.mse(a, b)?,
            AuxLossKind::Cosine => g.cosine_embedding(a, b)?,
        };
        let weighted = g.scale(loss_aux, T::from_f64(self.spec.aux_loss_weight));
        let loss_total = g.add(loss_cls, weighted)?;
        Ok(StitchOutput {
            logits,
            loss_cls,
            loss_aux: Some(loss_aux),
            loss_total,
        })
    }

    /// The stitching attention for one example: queries are decoder states
    /// of `s_{k-1}`, keys decoder states of `s_{k-2}`, values encoder states
    /// of `s_{k-1}`. Returns the attention output pooled at the query `[EOS]`.
    pub fn gbas_attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        ex: &LasiExample,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, MultiHeadOutput)> {
        let prev = context(ex, -1)?;
        let before = context(ex, -2)?;
        let rate = self.spec.bert_input_mask_rate;
        let v_ids = match mode.rng() {
            Some(rng) if rate > 0.0 => mask_tokens(&prev.enc, rate, rng),
            _ => prev.enc.clone(),
        };
        let cfg = BlockConfig {
            n_heads: self.spec.gbas_heads,
            ..self.bert.block
        };
        let (q, k, v, mask, pool) = if self.spec.gbas_pooled {
            let q = self.gpt_pooled(g, &prev.dec, mode)?;
            let k = self.gpt_pooled(g, &before.dec, mode)?;
            let v = self.bert_pooled(g, &v_ids, mode)?;
            (q, k, v, None, 0)
        } else {
            let q = gpt_encode(g, self.gpt, &self.params.sub("gpt"), &prev.dec, mode)?;
            let len = content_len(&before.dec).max(content_len(&v_ids));
            let k = decoder_states(g, self.gpt, &self.params.sub("gpt"), &before.dec[..len], None, mode)?;
            let v = encoder_states(g, self.bert, &self.params.sub("bert"), &v_ids[..len], mode)?;
            let valid: Vec<bool> = (0..len)
                .map(|j| before.dec[j] != crate::corpus::PAD && v_ids[j] != crate::corpus::PAD)
                .collect();
            let lq = q.pool_index + 1;
            (q.states, k, v, Some(AttentionMask::keys(lq, &valid)), q.pool_index)
        };
        let out = multi_head_attention(g, &cfg, &self.params.sub("gbas"), q, k, v, mask.as_ref(), mode)?;
        let pooled = g.select_rows(out.output, &[pool])?;
        Ok((pooled, out))
    }

    /// GBAS: the stitched vector (optionally with `B(s_{k-2})`) feeds the head.
    pub fn gbas_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &[&LasiExample],
        mode: &mut Mode<'_>,
    ) -> Result<StitchOutput> {
        if batch.is_empty() {
            return Err(Error::NoExamples);
        }
        let mut rows = Vec::with_capacity(batch.len());
        for ex in batch {
            check_target(ex, mode, false)?;
            let (pooled, _) = self.gbas_attend(g, ex, mode)?;
            let row = if self.spec.gbas_concat_prev {
                let before = context(ex, -2)?;
                let b2 = self.bert_pooled(g, &before.enc, mode)?;
                g.concat_cols(&[pooled, b2])?
            } else {
                pooled
            };
            rows.push(row);
        }
        let (logits, loss_cls) = self.head_loss(g, &rows, batch)?;
        Ok(StitchOutput {
            logits,
            loss_cls,
            loss_aux: None,
            loss_total: loss_cls,
        })
    }

    /// GPT+BERT: `[B(s_{k-1}) ‖ G(s_{k-1})]` into a double-width head.
    pub fn concat_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &[&LasiExample],
        mode: &mut Mode<'_>,
    ) -> Result<StitchOutput> {
        if batch.is_empty() {
            return Err(Error::NoExamples);
        }
        let mut rows = Vec::with_capacity(batch.len());
        for ex in batch {
            check_target(ex, mode, false)?;
            let prev = context(ex, -1)?;
            let b = self.bert_pooled(g, &prev.enc, mode)?;
            let gv = self.gpt_pooled(g, &prev.dec, mode)?;
            rows.push(g.concat_cols(&[b, gv])?);
        }
        let (logits, loss_cls) = self.head_loss(g, &rows, batch)?;
        Ok(StitchOutput {
            logits,
            loss_cls,
            loss_aux: None,
            loss_total: loss_cls,
        })
    }

    /// BERT(GPT): the decoder continues `s_{k-1}`; the encoder classifies
    /// the pair `[CLS] s_{k-1} [SEP] continuation [SEP]` from `[CLS]`.
    pub fn generate_classify_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &[&LasiExample],
        cache: &GenerationCache,
        gpt_params: &ParamSet<f32>,
        mode: &mut Mode<'_>,
    ) -> Result<StitchOutput> {
        if batch.is_empty() {
            return Err(Error::NoExamples);
        }
        let mut rows = Vec::with_capacity(batch.len());
        for ex in batch {
            check_target(ex, mode, false)?;
            let prev = context(ex, -1)?;
            let continuation = cache.continuation(self.gpt, gpt_params, &prev.dec, self.spec.gen_tokens)?;
            let pair = pair_sequence(&prev.enc, &continuation, self.bert.block.max_len);
            rows.push(self.bert_pooled(g, &pair, mode)?);
        }
        let (logits, loss_cls) = self.head_loss(g, &rows, batch)?;
        Ok(StitchOutput {
            logits,
            loss_cls,
            loss_aux: None,
            loss_total: loss_cls,
        })
    }
}

#[cfg(test)]
mod tests;
