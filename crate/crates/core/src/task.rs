//! Fine-tunable section classifiers: the single-model baselines and the
//! stitched encoder/decoder models behind one interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{LasiExample, WindowSpec};
use crate::error::{Error, Result};
use crate::models::{
    argmax, bert_encode, classify, content_len, encdec_encode, gpt_encode, ClassifierHead,
    ModelKind, ModelSpec,
};
use crate::nn::{seeded_rng, Mode};
use crate::params::{Bound, ParamSet};
use crate::stitching::{assemble, GenerationCache, Stitch, StitchKind, StitchModelSpec, StitchOutput};
use crate::tensor::{Graph, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Bert,
    Gpt,
    Encdec,
    BertOfGpt,
    GptPlusBert,
    Gbls,
    Gbas,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Bert,
        TaskKind::Gpt,
        TaskKind::Encdec,
        TaskKind::BertOfGpt,
        TaskKind::GptPlusBert,
        TaskKind::Gbls,
        TaskKind::Gbas,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Bert => "bert",
            TaskKind::Gpt => "gpt",
            TaskKind::Encdec => "encdec",
            TaskKind::BertOfGpt => "bert_of_gpt",
            TaskKind::GptPlusBert => "gpt_plus_bert",
            TaskKind::Gbls => "gbls",
            TaskKind::Gbas => "gbas",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::Bert => "BERT",
            TaskKind::Gpt => "GPT",
            TaskKind::Encdec => "BART",
            TaskKind::BertOfGpt => "BERT(GPT)",
            TaskKind::GptPlusBert => "GPT+BERT",
            TaskKind::Gbls => "GBLS",
            TaskKind::Gbas => "GBAS",
        }
    }

    pub fn stitch_kind(self) -> Option<StitchKind> {
        match self {
            TaskKind::BertOfGpt => Some(StitchKind::GenerateClassify),
            TaskKind::GptPlusBert => Some(StitchKind::Concat),
            TaskKind::Gbls => Some(StitchKind::Gbls),
            TaskKind::Gbas => Some(StitchKind::Gbas),
            _ => None,
        }
    }

    /// Pretrained language models the kind is built from.
    pub fn needs(self) -> &'static [ModelKind] {
        match self {
            TaskKind::Bert => &[ModelKind::Encoder],
            TaskKind::Gpt => &[ModelKind::Decoder],
            TaskKind::Encdec => &[ModelKind::EncoderDecoder],
            _ => &[ModelKind::Encoder, ModelKind::Decoder],
        }
    }

    /// Context offsets a stitched kind reads.
    fn required_offsets(self, stitch: &StitchModelSpec) -> &'static [i32] {
        use crate::stitching::MapperPairing;
        match self {
            TaskKind::Gbas => &[-2, -1],
            TaskKind::Gbls if stitch.mapper_pairing == MapperPairing::PreviousSentence => &[-2, -1],
            TaskKind::Gbls | TaskKind::BertOfGpt | TaskKind::GptPlusBert => &[-1],
            TaskKind::Bert | TaskKind::Gpt | TaskKind::Encdec => &[],
        }
    }

    /// Rejects windows a kind cannot use. Stitched kinds are look-ahead
    /// models and may never see offset 0 or later.
    pub fn validate_window(self, window: &WindowSpec, stitch: &StitchModelSpec) -> Result<()> {
        if self.stitch_kind().is_none() {
            return Ok(());
        }
        if !window.lookahead() {
            return Err(Error::Config(format!(
                "{} predicts the next sentence and cannot read offsets >= 0 (window {window})",
                self.as_str()
            )));
        }
        for &o in self.required_offsets(stitch) {
            if !window.contains(o) {
                return Err(Error::Config(format!(
                    "{} needs context offset {o}, missing from window {window}",
                    self.as_str()
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '(', ')', '+'], "_");
        let kind = match norm.trim_matches('_') {
            "bert" => TaskKind::Bert,
            "gpt" => TaskKind::Gpt,
            "encdec" | "bart" => TaskKind::Encdec,
            "bert_of_gpt" | "bert_gpt" => TaskKind::BertOfGpt,
            "gpt_plus_bert" | "gpt_bert" => TaskKind::GptPlusBert,
            "gbls" => TaskKind::Gbls,
            "gbas" => TaskKind::Gbas,
            _ => return Err(Error::Config(format!("unknown model kind `{s}`"))),
        };
        Ok(kind)
    }
}

/// Everything needed to rebuild a [`TaskModel`] around saved parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: TaskKind,
    pub window: WindowSpec,
    pub stitch: StitchModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bert: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpt: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encdec: Option<ModelSpec>,
    pub vocab_hash: String,
}

impl TaskMeta {
    fn spec(&self, kind: ModelKind) -> Result<&ModelSpec> {
        let s = match kind {
            ModelKind::Encoder => &self.bert,
            ModelKind::Decoder => &self.gpt,
            ModelKind::EncoderDecoder => &self.encdec,
        };
        s.as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs a pretrained {kind:?} model", self.kind)))
    }

    /// Parameter prefix of a single-model kind.
    fn prefix(&self) -> &'static str {
        match self.kind {
            TaskKind::Gpt => "gpt",
            TaskKind::Encdec => "encdec",
            _ => "bert",
        }
    }

    fn single_spec(&self) -> Result<&ModelSpec> {
        self.spec(self.kind.needs()[0])
    }
}

/// Pretrained language models a task is assembled from.
#[derive(Default)]
pub struct Pretrained<'a, T: Real> {
    pub bert: Option<(ModelSpec, &'a ParamSet<T>)>,
    pub gpt: Option<(ModelSpec, &'a ParamSet<T>)>,
    pub encdec: Option<(ModelSpec, &'a ParamSet<T>)>,
}

/// A section classifier with its parameters.
pub struct TaskModel<T: Real> {
    pub meta: TaskMeta,
    pub params: ParamSet<T>,
    /// BERT(GPT) only: the frozen decoder used for generation.
    frozen_gpt: Option<ParamSet<f32>>,
    cache: GenerationCache,
}

impl<T: Real> TaskModel<T> {
    /// Fresh classification head (and stitching parts) over pretrained models.
    pub fn new(
        kind: TaskKind,
        window: WindowSpec,
        stitch: StitchModelSpec,
        pretrained: Pretrained<'_, T>,
        vocab_hash: String,
        seed: u64,
    ) -> Result<Self> {
        kind.validate_window(&window, &stitch)?;
        let meta = TaskMeta {
            kind,
            window,
            stitch,
            bert: pretrained.bert.map(|(s, _)| s),
            gpt: pretrained.gpt.map(|(s, _)| s),
            encdec: pretrained.encdec.map(|(s, _)| s),
            vocab_hash,
        };
        let get = |k: ModelKind| -> Result<(&ModelSpec, &ParamSet<T>)> {
            let spec = meta.spec(k)?;
            let p = match k {
                ModelKind::Encoder => pretrained.bert.map(|(_, p)| p),
                ModelKind::Decoder => pretrained.gpt.map(|(_, p)| p),
                ModelKind::EncoderDecoder => pretrained.encdec.map(|(_, p)| p),
            };
            Ok((spec, p.expect("spec and params are set together")))
        };
        let params = match kind.stitch_kind() {
            Some(sk) => {
                let b = get(ModelKind::Encoder)?;
                let g = get(ModelKind::Decoder)?;
                assemble(sk, &meta.stitch, b, g, seed)?
            }
            None => {
                let (spec, base) = get(kind.needs()[0])?;
                spec.validate()?;
                let mut p = ParamSet::new();
                p.absorb(meta.prefix(), base);
                let head = ClassifierHead {
                    input_width: spec.block.d_model * meta.window.offsets().len(),
                    n_labels: spec.n_labels,
                };
                head.init(&mut p, "head", &mut seeded_rng(seed));
                p
            }
        };
        Self::from_parts(meta, params)
    }

    /// Rebuilds a model from saved metadata and parameters.
    pub fn from_parts(meta: TaskMeta, params: ParamSet<T>) -> Result<Self> {
        meta.kind.validate_window(&meta.window, &meta.stitch)?;
        for k in meta.kind.needs() {
            meta.spec(*k)?;
        }
        if !params.contains("head.w") {
            return Err(Error::Config("parameters have no classification head".into()));
        }
        let frozen_gpt = (meta.kind == TaskKind::BertOfGpt).then(|| params.extract("gpt").cast());
        Ok(Self {
            meta,
            params,
            frozen_gpt,
            cache: GenerationCache::new(),
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.meta.kind
    }

    pub fn n_labels(&self) -> usize {
        self.meta
            .single_spec()
            .or_else(|_| self.meta.spec(ModelKind::Encoder))
            .map_or(crate::corpus::Label::COUNT, |s| s.n_labels)
    }

    /// Whether fine-tuning updates `name`. BERT(GPT) keeps its generator frozen.
    pub fn trainable(&self, name: &str) -> bool {
        !(self.meta.kind == TaskKind::BertOfGpt && name.starts_with("gpt."))
    }

    /// Number of cached BERT(GPT) continuations.
    pub fn cached_generations(&self) -> usize {
        self.cache.len()
    }

    /// Logits and losses for a batch. Evaluation-mode batches must carry no
    /// target sentence; see [`LasiExample::without_target`].
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &[&LasiExample],
        mode: &mut Mode<'_>,
    ) -> Result<StitchOutput> {
        if batch.is_empty() {
            return Err(Error::NoExamples);
        }
        let Some(sk) = self.meta.kind.stitch_kind() else {
            return self.single_forward(g, bound, batch, mode);
        };
        let st = Stitch {
            spec: &self.meta.stitch,
            bert: self.meta.spec(ModelKind::Encoder)?,
            gpt: self.meta.spec(ModelKind::Decoder)?,
            params: bound.root(),
        };
        match sk {
            StitchKind::Gbls => st.gbls_forward(g, batch, mode),
            StitchKind::Gbas => st.gbas_forward(g, batch, mode),
            StitchKind::Concat => st.concat_forward(g, batch, mode),
            StitchKind::GenerateClassify => {
                let gpt = self.frozen_gpt.as_ref().expect("set for BERT(GPT)");
                st.generate_classify_forward(g, batch, &self.cache, gpt, mode)
            }
        }
    }

    fn single_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &[&LasiExample],
        mode: &mut Mode<'_>,
    ) -> Result<StitchOutput> {
        let spec = self.meta.single_spec()?;
        let p = bound.scope(self.meta.prefix());
        let mut rows = Vec::with_capacity(batch.len());
        for ex in batch {
            if !mode.is_train() && ex.target.is_some() {
                return Err(Error::TargetInEval);
            }
            let mut parts = Vec::with_capacity(self.meta.window.offsets().len());
            for &o in self.meta.window.offsets() {
                let c = ex.context(o).ok_or(Error::MissingContext(o))?;
                let e = match self.meta.kind {
                    TaskKind::Bert => {
                        bert_encode(g, spec, &p, &c.enc[..content_len(&c.enc)], mode)?
                    }
                    TaskKind::Gpt => gpt_encode(g, spec, &p, &c.dec, mode)?,
                    _ => encdec_encode(g, spec, &p, &c.dec, mode)?,
                };
                parts.push(e.pooled);
            }
            rows.push(if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_cols(&parts)?
            });
        }
        let features = g.concat_rows(&rows)?;
        let logits = classify(g, &bound.scope("head"), features)?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label.id()).collect();
        let loss = g.cross_entropy(logits, &labels)?;
        Ok(StitchOutput {
            logits,
            loss_cls: loss,
            loss_aux: None,
            loss_total: loss,
        })
    }

    /// Evaluation-mode logits, one row per example. Targets are stripped
    /// before the model sees the examples.
    pub fn logits(&self, examples: &[LasiExample], batch_size: usize) -> Result<Vec<Vec<T>>> {
        if examples.is_empty() {
            return Err(Error::NoExamples);
        }
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let stripped: Vec<LasiExample> = chunk.iter().map(LasiExample::without_target).collect();
            let refs: Vec<&LasiExample> = stripped.iter().collect();
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let o = self.batch_loss(&mut g, &bound, &refs, &mut Mode::Eval)?;
            let l = g.value(o.logits);
            out.extend((0..refs.len()).map(|r| l.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, examples: &[LasiExample], batch_size: usize) -> Result<Vec<usize>> {
        Ok(self
            .logits(examples, batch_size)?
            .iter()
            .map(|row| argmax(row))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_examples, parse_rct_str, BoundaryPolicy, LabelPolicy, Vocab};
    use crate::nn::BlockConfig;

    const DOCS: &str = "###1
BACKGROUND\tstroke is a leading cause of disability .
OBJECTIVE\twe tested early mobilisation after stroke .
METHOD\tpatients were randomised within two days .
METHOD\toutcomes were measured at three months .
RESULT\tmobilisation improved walking .
CONCLUSION\tearly mobilisation is safe .
";

    fn setup(kind: TaskKind, window: &str) -> (TaskModel<f32>, Vec<LasiExample>) {
        let docs = parse_rct_str(DOCS, LabelPolicy::Strict).unwrap();
        let vocab = Vocab::build(&docs, 1, 500).unwrap();
        let block = BlockConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_len: 100,
            dropout: 0.1,
        };
        let spec = |k| ModelSpec {
            block,
            n_layers: 1,
            ..ModelSpec::new(k, vocab.len())
        };
        let (b, g, e) = (
            spec(ModelKind::Encoder),
            spec(ModelKind::Decoder),
            spec(ModelKind::EncoderDecoder),
        );
        let (bp, gp, ep) = (b.init(1), g.init(2), e.init(3));
        let window: WindowSpec = window.parse().unwrap();
        let m = TaskModel::new(
            kind,
            window.clone(),
            StitchModelSpec::default(),
            Pretrained {
                bert: Some((b, &bp)),
                gpt: Some((g, &gp)),
                encdec: Some((e, &ep)),
            },
            vocab.hash().to_string(),
            9,
        )
        .unwrap();
        (m, make_examples(&docs, &window, &vocab, BoundaryPolicy::Skip))
    }

    #[test]
    fn kinds_parse_from_their_names() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
        }
        assert_eq!("BERT(GPT)".parse::<TaskKind>().unwrap(), TaskKind::BertOfGpt);
        assert_eq!("GPT+BERT".parse::<TaskKind>().unwrap(), TaskKind::GptPlusBert);
        assert!("xgboost".parse::<TaskKind>().is_err());
    }

    #[test]
    fn windows_are_checked_against_the_kind() {
        let s = StitchModelSpec::default();
        let w = |t: &str| t.parse::<WindowSpec>().unwrap();
        let err = TaskKind::Gbas.validate_window(&w("-1"), &s).unwrap_err();
        assert!(err.to_string().contains("-2"), "{err}");
        assert!(TaskKind::Gbls.validate_window(&w("-1,0"), &s).is_err());
        assert!(TaskKind::GptPlusBert.validate_window(&w("-2"), &s).is_err());
        assert!(TaskKind::Gbas.validate_window(&w("-2,-1"), &s).is_ok());
        assert!(TaskKind::Bert.validate_window(&w("0"), &s).is_ok());
    }

    #[test]
    fn every_kind_predicts_and_trains() {
        for kind in TaskKind::ALL {
            let (m, ex) = setup(kind, "-2,-1");
            let pred = m.predict(&ex, 2).unwrap();
            assert_eq!(pred.len(), ex.len());
            let refs: Vec<&LasiExample> = ex.iter().collect();
            let mut g = Graph::new();
            let bound = m.params.bind_where(&mut g, |n| m.trainable(n));
            let mut rng = seeded_rng(0);
            let out = m.batch_loss(&mut g, &bound, &refs, &mut Mode::Train(&mut rng)).unwrap();
            assert_eq!(out.loss_aux.is_some(), kind == TaskKind::Gbls, "{kind}");
            g.backward(out.loss_total).unwrap();
            let head = g.grad(bound.var("head.w")).unwrap();
            assert!(head.all_finite());
        }
    }

    #[test]
    fn multi_offset_windows_widen_single_model_heads() {
        let (m, _) = setup(TaskKind::Bert, "-2,-1");
        assert_eq!(m.params.get("head.w").unwrap().shape(), &[32, 5]);
        let (m, _) = setup(TaskKind::Gpt, "-1");
        assert_eq!(m.params.get("head.w").unwrap().shape(), &[16, 5]);
    }

    #[test]
    fn generator_is_frozen_in_bert_of_gpt() {
        let (m, _) = setup(TaskKind::BertOfGpt, "-1");
        assert!(!m.trainable("gpt.emb.tok_emb"));
        assert!(m.trainable("bert.emb.tok_emb"));
        let (m, _) = setup(TaskKind::Gbls, "-1");
        assert!(m.trainable("gpt.emb.tok_emb"));
    }

    #[test]
    fn garbage_targets_do_not_move_logits() {
        for kind in TaskKind::ALL {
            let (m, ex) = setup(kind, "-2,-1");
            let mut garbage = ex.clone();
            for e in &mut garbage {
                let t = e.target.as_mut().unwrap();
                t.text = "zzz qqq".into();
                t.enc.iter_mut().for_each(|i| *i = 1);
                t.dec.iter_mut().for_each(|i| *i = 3);
            }
            let a = m.logits(&ex, 3).unwrap();
            let b = m.logits(&garbage, 3).unwrap();
            let bits = |v: &Vec<Vec<f32>>| {
                v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(&a), bits(&b), "{kind}");
        }
    }

    #[test]
    fn meta_round_trips_through_toml() {
        let (m, _) = setup(TaskKind::Gbas, "-2,-1");
        let text = toml::to_string(&m.meta).unwrap();
        let back: TaskMeta = toml::from_str(&text).unwrap();
        assert_eq!(back, m.meta);
        let again = TaskModel::from_parts(back, m.params.clone()).unwrap();
        assert_eq!(again.kind(), TaskKind::Gbas);
    }
}
