use lasi_core::corpus::{
    encode_sentence, parse_rct_str, synthetic_rct, EncodeStyle, LabelPolicy, Vocab, BOS, EOS,
};
use lasi_core::models::{clm_step, generate, mlm_step, ModelKind, ModelSpec};
use lasi_core::nn::{seeded_rng, BlockConfig, Mode};
use lasi_core::training::{optimize, pretrain, AdamState, PretrainConfig, TrainConfig};

fn small(kind: ModelKind, vocab: usize, dropout: f64) -> ModelSpec {
    ModelSpec {
        block: BlockConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_len: 100,
            dropout,
        },
        n_layers: 1,
        ..ModelSpec::new(kind, vocab)
    }
}

fn adam(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        weight_decay: 0.0,
        ..TrainConfig::default()
    }
}

fn sentences(n_docs: usize, style: EncodeStyle) -> (Vocab, Vec<Vec<u32>>) {
    let docs = parse_rct_str(&synthetic_rct(n_docs, 11), LabelPolicy::Strict).unwrap();
    let vocab = Vocab::build(&docs, 1, 2000).unwrap();
    let seqs = docs
        .iter()
        .flat_map(|d| d.sentences.iter())
        .map(|s| encode_sentence(&vocab, &s.text, style))
        .collect();
    (vocab, seqs)
}

#[test]
fn mlm_loss_strictly_decreases_on_an_overfit_set() {
    let (vocab, seqs) = sentences(12, EncodeStyle::Encoder);
    let batch: Vec<Vec<u32>> = seqs.into_iter().take(100).collect();
    assert_eq!(batch.len(), 100);
    let spec = small(ModelKind::Encoder, vocab.len(), 0.0);
    let mut params = spec.init::<f32>(5);
    let mut state = AdamState::new();
    let cfg = adam(1e-3);
    let mut losses = Vec::new();
    for step in 0..50 {
        let l = optimize(&mut params, &|_| true, &mut state, &cfg, (1, step), |g, b| {
            // Same masks every step, so the losses are comparable.
            let mut rng = seeded_rng(42);
            let loss = mlm_step(g, &spec, &b.root(), &batch, 0.15, &mut rng)?;
            Ok((loss, loss, None))
        })
        .unwrap();
        losses.push(l.total);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn clm_overfits_a_single_repeated_token() {
    let docs = parse_rct_str("###1\nMETHOD\tdose dose dose dose dose dose\n", LabelPolicy::Strict).unwrap();
    let vocab = Vocab::build(&docs, 1, 100).unwrap();
    let seq = encode_sentence(&vocab, &docs[0].sentences[0].text, EncodeStyle::Decoder);
    let batch = vec![seq; 4];
    let spec = small(ModelKind::Decoder, vocab.len(), 0.0);
    let mut params = spec.init::<f32>(1);
    let mut state = AdamState::new();
    let cfg = adam(3e-3);
    let mut last = f64::INFINITY;
    for step in 0..300 {
        let l = optimize(&mut params, &|_| true, &mut state, &cfg, (1, step), |g, b| {
            let loss = clm_step(g, &spec, &b.root(), &batch, &mut Mode::Eval)?;
            Ok((loss, loss, None))
        })
        .unwrap();
        last = l.total;
    }
    assert!(last < 0.05, "{last}");
}

#[test]
fn greedy_generation_reproduces_an_overfit_sequence() {
    let docs = parse_rct_str("###1\nRESULT\ta b c\n", LabelPolicy::Strict).unwrap();
    let vocab = Vocab::build(&docs, 1, 100).unwrap();
    let seq = encode_sentence(&vocab, "a b c", EncodeStyle::Decoder);
    let spec = small(ModelKind::Decoder, vocab.len(), 0.0);
    let mut params = spec.init::<f32>(2);
    let mut state = AdamState::new();
    let cfg = adam(3e-3);
    for step in 0..200 {
        optimize(&mut params, &|_| true, &mut state, &cfg, (1, step), |g, b| {
            let loss = clm_step(g, &spec, &b.root(), std::slice::from_ref(&seq), &mut Mode::Eval)?;
            Ok((loss, loss, None))
        })
        .unwrap();
    }
    let out = generate(&spec, &params, &[BOS, vocab.id("a")], 50).unwrap();
    let expect = vec![BOS, vocab.id("a"), vocab.id("b"), vocab.id("c"), EOS];
    assert_eq!(out, expect);
    assert_eq!(generate(&spec, &params, &[BOS, vocab.id("a")], 50).unwrap(), out);
}

#[test]
fn decoder_pretraining_cuts_loss_by_a_third() {
    let (vocab, seqs) = sentences(110, EncodeStyle::Decoder);
    let seqs: Vec<Vec<u32>> = seqs.into_iter().take(1000).collect();
    assert_eq!(seqs.len(), 1000);
    let spec = small(ModelKind::Decoder, vocab.len(), 0.1);
    let cfg = PretrainConfig {
        learning_rate: 2e-3,
        epochs: 2,
        ..PretrainConfig::default()
    };
    let mut params = spec.init::<f32>(3);
    let log = pretrain(&spec, &mut params, &seqs, &cfg).unwrap();
    let last = *log.epoch_loss.last().unwrap();
    assert!(last < 0.7 * log.initial_loss, "{log:?}");

    let mut again = spec.init::<f32>(3);
    let log2 = pretrain(&spec, &mut again, &seqs, &cfg).unwrap();
    assert_eq!(log, log2);
}

#[test]
fn every_pretraining_objective_runs() {
    for (kind, style) in [
        (ModelKind::Encoder, EncodeStyle::Encoder),
        (ModelKind::EncoderDecoder, EncodeStyle::Decoder),
    ] {
        let (vocab, seqs) = sentences(4, style);
        let spec = small(kind, vocab.len(), 0.1);
        let mut params = spec.init::<f32>(3);
        let cfg = PretrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 16,
            ..PretrainConfig::default()
        };
        let log = pretrain(&spec, &mut params, &seqs, &cfg).unwrap();
        assert_eq!(log.epoch_loss.len(), 2);
        assert!(log.epoch_loss.iter().all(|l| l.is_finite()));
    }
}
