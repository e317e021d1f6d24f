use super::*;
use crate::corpus::{
    make_examples, parse_rct_str, BoundaryPolicy, LabelPolicy, Vocab, WindowSpec, PAD,
};
use crate::models::{ModelKind, ModelSpec};
use crate::nn::{seeded_rng, BlockConfig};
use crate::tensor::{grad_check, Tensor, TensorError};

const DOCS: &str = "###1
BACKGROUND\tcancer is a common disease in older adults .
OBJECTIVE\twe aimed to test a new drug for cancer .
METHOD\tpatients were randomly assigned to drug or placebo .
RESULT\tthe drug reduced tumour size in most patients .
CONCLUSION\tthe new drug is effective .

###2
OBJECTIVE\tto assess exercise in older adults .
METHOD\tadults were assigned to exercise or usual care .
RESULT\texercise improved strength .
CONCLUSION\texercise is safe and helpful for adults .
";

struct Fixture {
    vocab: Vocab,
    bert: ModelSpec,
    gpt: ModelSpec,
    examples: Vec<LasiExample>,
}

fn fixture(dropout: f64) -> Fixture {
    let docs = parse_rct_str(DOCS, LabelPolicy::Strict).unwrap();
    let vocab = Vocab::build(&docs, 1, 1000).unwrap();
    let block = BlockConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 100,
        dropout,
    };
    let spec = |kind| ModelSpec {
        kind,
        block,
        vocab_size: vocab.len(),
        n_layers: 1,
        n_labels: 5,
    };
    let window: WindowSpec = "-2,-1".parse().unwrap();
    let examples = make_examples(&docs, &window, &vocab, BoundaryPolicy::Skip);
    Fixture {
        bert: spec(ModelKind::Encoder),
        gpt: spec(ModelKind::Decoder),
        vocab,
        examples,
    }
}

fn params<T: Real>(f: &Fixture, kind: StitchKind, spec: &StitchModelSpec) -> ParamSet<T> {
    let b = f.bert.init::<T>(1);
    let g = f.gpt.init::<T>(2);
    let mut p = assemble(kind, spec, (&f.bert, &b), (&f.gpt, &g), 3).unwrap();
    // Larger head and stitching weights than the initialiser so outputs are not all ~0.
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names.iter().filter(|n| n.starts_with("head.") || n.starts_with("gbas.") || n.starts_with("mapper.")) {
        p.get_mut(n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x *= T::from_f64(20.0));
    }
    p
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, TensorError> {
    match r {
        Ok(v) => Ok(v),
        Err(Error::Tensor(e)) => Err(e),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn mapper_contracts() {
    let mut p = ParamSet::<f64>::new();
    let d = 4;
    p.insert("m.l1.w", Tensor::zeros(&[d, d]));
    p.insert("m.l1.b", Tensor::zeros(&[d]));
    p.insert("m.l2.w", Tensor::zeros(&[d, d]));
    p.insert("m.l2.b", Tensor::from_f64(vec![d], &[1.0, -2.0, 0.5, 3.0]).unwrap());
    let x = Tensor::from_f64(vec![1, d], &[0.3, -1.2, 2.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = mapper_apply(&mut g, &b.scope("m"), xv).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5, 3.0]);

    p.insert("m.l1.w", Tensor::eye(d));
    p.insert("m.l2.w", Tensor::eye(d));
    p.insert("m.l2.b", Tensor::zeros(&[d]));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = mapper_apply(&mut g, &b.scope("m"), xv).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
    assert_eq!(g.value(y).data(), &expect[..]);

    let wide = g.constant(Tensor::zeros(&[1, d + 1]));
    assert!(matches!(
        mapper_apply(&mut g, &b.scope("m"), wide),
        Err(Error::WidthMismatch { .. })
    ));
}

#[test]
fn mapper_gradients_pass_finite_differences() {
    let mut rng = seeded_rng(7);
    let mut p = ParamSet::<f64>::new();
    init_mapper(&mut p, "m", 5, 4, &mut rng);
    for n in ["m.l1.w", "m.l2.w"] {
        p.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v *= 40.0);
    }
    let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
    for target in ["m.l1.w", "m.l1.b", "m.l2.w", "m.l2.b"] {
        let rep = grad_check(
            |g, w| {
                let mut b = p.bind(g, false);
                b.insert(target, w);
                let xv = g.constant(x.clone());
                let y = lift(mapper_apply(g, &b.scope("m"), xv))?;
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            },
            p.get(target).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{target}: {}", rep.max_rel_error);
    }
    let rep = grad_check(
        |g, xv| {
            let b = p.bind(g, false);
            let y = lift(mapper_apply(g, &b.scope("m"), xv))?;
            Ok(g.sum(y))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4);
}

#[test]
fn defaults_follow_the_method() {
    let s = StitchModelSpec::default();
    assert_eq!(s.aux_loss_weight, 0.05);
    assert_eq!(s.bert_input_mask_rate, 0.10);
    assert_eq!(s.gbas_heads, 8);
    assert_eq!(s.gen_tokens, 50);
    assert!(s.validate(16).is_ok());
    assert!(s.validate(12).is_err());
    assert!(StitchModelSpec { aux_loss_weight: -1.0, ..s }.validate(16).is_err());
    assert!(StitchModelSpec { bert_input_mask_rate: 1.0, ..s }.validate(16).is_err());
}

fn gbls_train(f: &Fixture, spec: &StitchModelSpec, p: &ParamSet<f32>, seed: u64) -> (f32, f32, f32) {
    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let st = Stitch {
        spec,
        bert: &f.bert,
        gpt: &f.gpt,
        params: b.root(),
    };
    let batch: Vec<&LasiExample> = f.examples.iter().collect();
    let mut rng = seeded_rng(seed);
    let out = st.gbls_forward(&mut g, &batch, &mut Mode::Train(&mut rng)).unwrap();
    g.backward(out.loss_total).unwrap();
    (
        g.value(out.loss_total).item(),
        g.value(out.loss_cls).item(),
        g.value(out.loss_aux.unwrap()).item(),
    )
}

#[test]
fn gbls_loss_decomposes_exactly() {
    let f = fixture(0.1);
    let spec = StitchModelSpec::default();
    let p = params::<f32>(&f, StitchKind::Gbls, &spec);
    for seed in 0..5 {
        let (total, cls, aux) = gbls_train(&f, &spec, &p, seed);
        assert!(aux > 0.0);
        assert_eq!(total, cls + 0.05f32 * aux);
    }
    let off = StitchModelSpec {
        aux_loss_weight: 0.0,
        ..spec
    };
    let (total, cls, _) = gbls_train(&f, &off, &p, 1);
    assert_eq!(total, cls);
    let cos = StitchModelSpec {
        aux_loss_kind: AuxLossKind::Cosine,
        ..spec
    };
    let (_, _, aux) = gbls_train(&f, &cos, &p, 1);
    assert!(aux > 0.0 && aux <= 2.0);
}

#[test]
fn gbls_aux_vanishes_when_mapper_reproduces_the_target() {
    let f = fixture(0.0);
    let spec = StitchModelSpec {
        bert_input_mask_rate: 0.0,
        ..Default::default()
    };
    let mut p = params::<f32>(&f, StitchKind::Gbls, &spec);
    let ex = &f.examples[0];
    let target = ex.target.as_ref().unwrap();
    let bp = p.extract("bert");
    let bvec = crate::models::pooled_embedding(&f.bert, &bp, &target.enc, None).unwrap();
    for n in ["mapper.l1.w", "mapper.l2.w"] {
        p.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p.insert("mapper.l2.b", bvec.vector.clone());
    let one = Fixture {
        examples: vec![ex.clone()],
        vocab: f.vocab.clone(),
        ..f
    };
    let (_, _, aux) = gbls_train(&one, &spec, &p, 0);
    assert_eq!(aux, 0.0);
}

#[test]
fn look_ahead_contract_is_enforced() {
    let f = fixture(0.1);
    let spec = StitchModelSpec::default();
    let p = params::<f32>(&f, StitchKind::Gbls, &spec);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let st = Stitch {
        spec: &spec,
        bert: &f.bert,
        gpt: &f.gpt,
        params: b.root(),
    };
    let with = &f.examples[0];
    let without = with.without_target();
    assert!(matches!(
        st.gbls_forward(&mut g, &[with], &mut Mode::Eval),
        Err(Error::TargetInEval)
    ));
    let mut rng = seeded_rng(0);
    assert!(matches!(
        st.gbls_forward(&mut g, &[&without], &mut Mode::Train(&mut rng)),
        Err(Error::TargetRequired)
    ));
    let a = st.gbls_forward(&mut g, &[&without], &mut Mode::Eval).unwrap();
    assert!(a.loss_aux.is_none());
    let mut garbage = with.clone();
    garbage.target.as_mut().unwrap().enc = vec![PAD; 100];
    let c = st.gbls_forward(&mut g, &[&garbage.without_target()], &mut Mode::Eval).unwrap();
    assert_eq!(g.value(a.logits).data(), g.value(c.logits).data());
}

fn gbas_setup(spec: &StitchModelSpec) -> (Fixture, ParamSet<f64>) {
    let f = fixture(0.0);
    let p = params::<f64>(&f, StitchKind::Gbas, spec);
    (f, p)
}

#[test]
fn gbas_weights_are_normalised_and_output_convex() {
    let spec = StitchModelSpec::default();
    let (f, mut p) = gbas_setup(&spec);
    let d = 16;
    p.insert("gbas.wv", Tensor::eye(d));
    p.insert("gbas.wo", Tensor::eye(d));
    for ex in &f.examples {
        let ex = ex.without_target();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let st = Stitch {
            spec: &spec,
            bert: &f.bert,
            gpt: &f.gpt,
            params: b.root(),
        };
        let (pooled, out) = st.gbas_attend(&mut g, &ex, &mut Mode::Eval).unwrap();
        assert_eq!(out.weights.len(), 8);
        for w in &out.weights {
            let w = g.value(*w);
            for r in 0..w.shape()[0] {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
        // Values are encoder states of s_{k-1}; recompute them for the hull check.
        let prev = ex.context(-1).unwrap();
        let before = ex.context(-2).unwrap();
        let len = content_len(&before.dec).max(content_len(&prev.enc));
        let v = encoder_states(&mut g, &f.bert, &b.scope("bert"), &prev.enc[..len], &mut Mode::Eval)
            .unwrap();
        let v = g.value(v);
        let valid: Vec<usize> = (0..len)
            .filter(|&j| before.dec[j] != PAD && prev.enc[j] != PAD)
            .collect();
        for (c, &y) in g.value(pooled).data().iter().enumerate() {
            let col = valid.iter().map(|&j| v.row(j)[c]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }
}

#[test]
fn gbas_gradients_pass_finite_differences() {
    let spec = StitchModelSpec::default();
    let (f, p) = gbas_setup(&spec);
    let ex = f.examples[1].without_target();
    for target in ["gbas.wq", "gbas.wk", "gbas.wv", "gbas.wo", "head.w"] {
        let rep = grad_check(
            |g, w| {
                let mut b = p.bind(g, false);
                b.insert(target, w);
                let st = Stitch {
                    spec: &spec,
                    bert: &f.bert,
                    gpt: &f.gpt,
                    params: b.root(),
                };
                let out = lift(st.gbas_forward(g, &[&ex], &mut Mode::Eval))?;
                Ok(out.loss_cls)
            },
            p.get(target).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{target}: {}", rep.max_rel_error);
    }
}

#[test]
fn gbas_requires_the_earlier_sentence() {
    let spec = StitchModelSpec::default();
    let (f, p) = gbas_setup(&spec);
    let mut ex = f.examples[0].without_target();
    ex.contexts.retain(|c| c.offset == -1);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let st = Stitch {
        spec: &spec,
        bert: &f.bert,
        gpt: &f.gpt,
        params: b.root(),
    };
    assert!(matches!(
        st.gbas_forward(&mut g, &[&ex], &mut Mode::Eval),
        Err(Error::MissingContext(-2))
    ));
}

#[test]
fn gbas_variants_run() {
    for spec in [
        StitchModelSpec {
            gbas_pooled: true,
            ..Default::default()
        },
        StitchModelSpec {
            gbas_concat_prev: true,
            ..Default::default()
        },
    ] {
        let (f, p) = gbas_setup(&spec);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let st = Stitch {
            spec: &spec,
            bert: &f.bert,
            gpt: &f.gpt,
            params: b.root(),
        };
        let ex = f.examples[0].without_target();
        let out = st.gbas_forward(&mut g, &[&ex], &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 5]);
    }
}

#[test]
fn concat_head_is_linear_in_the_branches() {
    let f = fixture(0.0);
    let spec = StitchModelSpec::default();
    let mut p = params::<f64>(&f, StitchKind::Concat, &spec);
    assert_eq!(p.get("head.w").unwrap().shape(), &[32, 5]);
    // Zero the decoder half of the head.
    let w = p.get_mut("head.w").unwrap();
    w.data_mut()[16 * 5..].iter_mut().for_each(|v| *v = 0.0);
    let ex = f.examples[0].without_target();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let st = Stitch {
        spec: &spec,
        bert: &f.bert,
        gpt: &f.gpt,
        params: b.root(),
    };
    let out = st.concat_forward(&mut g, &[&ex], &mut Mode::Eval).unwrap();
    let again = st.concat_forward(&mut g, &[&ex], &mut Mode::Eval).unwrap();
    assert_eq!(g.value(out.logits).data(), g.value(again.logits).data());

    let prev = ex.context(-1).unwrap();
    let bvec = crate::models::pooled_embedding(&f.bert, &p.extract("bert"), &prev.enc, None).unwrap();
    let hw = p.get("head.w").unwrap();
    let hb = p.get("head.b").unwrap();
    for c in 0..5 {
        let expect: f64 = (0..16).map(|i| bvec.vector.data()[i] * hw.data()[i * 5 + c]).sum::<f64>()
            + hb.data()[c];
        assert!((g.value(out.logits).data()[c] - expect).abs() <= 1e-12);
    }
}

#[test]
fn generate_classify_is_bounded_and_deterministic() {
    let f = fixture(0.0);
    let spec = StitchModelSpec::default();
    let p = params::<f32>(&f, StitchKind::GenerateClassify, &spec);
    let gpt_p = p.extract("gpt");
    let cache = GenerationCache::new();
    let run = || {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let st = Stitch {
            spec: &spec,
            bert: &f.bert,
            gpt: &f.gpt,
            params: b.root(),
        };
        let batch: Vec<LasiExample> = f.examples.iter().map(|e| e.without_target()).collect();
        let refs: Vec<&LasiExample> = batch.iter().collect();
        let out = st
            .generate_classify_forward(&mut g, &refs, &cache, &gpt_p, &mut Mode::Eval)
            .unwrap();
        g.value(out.logits).clone()
    };
    let a = run();
    assert_eq!(cache.len(), f.examples.len());
    assert_eq!(a, run());
    for ex in &f.examples {
        let prev = ex.context(-1).unwrap();
        let cont = cache.continuation(&f.gpt, &gpt_p, &prev.dec, 50).unwrap();
        assert!(cont.len() <= 50);
        assert!(pair_sequence(&prev.enc, &cont, 100).len() <= 100);
    }
}
