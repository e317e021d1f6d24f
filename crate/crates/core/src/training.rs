//! AdamW, the fine-tuning and pretraining loops, best-epoch selection,
//! weighted classification metrics and the frozen-feature baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocIndex, LasiExample, PerturbationSpec, Vocab, WindowSpec};
use crate::error::{Error, Result};
use crate::models::{
    argmax, bert_encode, classify, clm_step, denoise_step, mlm_step, trim_padding, ClassifierHead,
    ModelKind, ModelSpec,
};
use crate::nn::{seeded_rng, Mode};
use crate::params::{Bound, ParamSet};
use crate::task::TaskModel;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} in {self:?}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }
}

/// Biases and layer-norm parameters are exempt from decay.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last.starts_with('b') || matches!(last, "gain" | "shift"))
}

#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Real> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    /// Updates applied per parameter; parameters without a gradient skip a step.
    steps: BTreeMap<String, u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.steps.get(name).copied().unwrap_or(0)
    }
}

/// One AdamW update for every `(name, gradient)` pair. All gradients are
/// checked before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let lr = T::from_f64(cfg.learning_rate);
    for (name, g) in grads {
        let step = state.steps.entry(name.clone()).or_insert(0);
        *step += 1;
        let t = *step as i32;
        let c1 = T::from_f64(1.0 - b1.powi(t));
        let c2 = T::from_f64(1.0 - b2.powi(t));
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = if decays(name) {
            T::from_f64(cfg.learning_rate * cfg.weight_decay)
        } else {
            T::zero()
        };
        let (b1, b2, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(cfg.eps));
        let p = params.get_mut(name).expect("checked above");
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= decay * *x;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub cls: f64,
    pub aux: Option<f64>,
}

/// Losses a step's forward pass produced: total, classification, auxiliary.
pub type LossVars = (Var, Var, Option<Var>);

/// Forward, backward and AdamW update of every trainable parameter that
/// received a gradient. `at` is the `(epoch, step)` reported on divergence.
pub fn optimize<T, F>(
    params: &mut ParamSet<T>,
    trainable: &dyn Fn(&str) -> bool,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    at: (usize, usize),
    forward: F,
) -> Result<StepLosses>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &Bound) -> Result<LossVars>,
{
    let mut g = Graph::new();
    let bound = params.bind_where(&mut g, trainable);
    let (total, cls, aux) = forward(&mut g, &bound)?;
    let losses = StepLosses {
        total: g.value(total).item().as_f64(),
        cls: g.value(cls).item().as_f64(),
        aux: aux.map(|a| g.value(a).item().as_f64()),
    };
    if !losses.total.is_finite() {
        return Err(Error::Diverged {
            epoch: at.0,
            step: at.1,
        });
    }
    g.backward(total)?;
    let grads: Vec<(String, Tensor<T>)> = bound
        .iter()
        .filter(|(n, _)| trainable(n))
        .filter_map(|(n, v)| g.grad(v).map(|t| (n.to_string(), t)))
        .collect();
    adam_step(params, &grads, state, cfg)?;
    Ok(losses)
}

/// Weighted classification metrics and the confusion matrix behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[gold][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub n_examples: u64,
}

impl Metrics {
    /// Per-class precision, recall and F1 averaged with weights equal to each
    /// class's gold count.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Config("confusion matrix must be square".into()));
        }
        let n: u64 = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::NoExamples);
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..k).map(|i| confusion[i][c]).sum();
            let tp = confusion[c][c] as f64;
            let pc = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let rc = if support == 0 { 0.0 } else { tp / support as f64 };
            let fc = if pc + rc == 0.0 { 0.0 } else { 2.0 * pc * rc / (pc + rc) };
            let w = support as f64;
            p += w * pc;
            r += w * rc;
            f += w * fc;
        }
        let nf = n as f64;
        Ok(Self {
            accuracy: correct as f64 / nf,
            precision: p / nf,
            recall: r / nf,
            f1: f / nf,
            confusion,
            n_examples: n,
        })
    }

    pub fn from_predictions(n_labels: usize, gold: &[usize], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::Config(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; n_labels]; n_labels];
        for (&g, &p) in gold.iter().zip(predicted) {
            if g >= n_labels || p >= n_labels {
                return Err(Error::Config(format!("label {} out of range", g.max(p))));
            }
            confusion[g][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Test-time noise applied before evaluation.
#[derive(Clone, Copy)]
pub struct Perturbation<'a> {
    pub spec: PerturbationSpec,
    pub vocab: &'a Vocab,
    pub docs: &'a DocIndex,
}

const EVAL_BATCH: usize = 64;

/// Metrics of `model` on `examples`, perturbed first when asked.
pub fn evaluate<T: Real>(
    model: &TaskModel<T>,
    examples: &[LasiExample],
    perturbation: Option<Perturbation<'_>>,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::NoExamples);
    }
    let perturbed;
    let examples = match perturbation {
        Some(p) => {
            perturbed = examples
                .iter()
                .map(|e| p.spec.apply(p.vocab, e, p.docs))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            &perturbed[..]
        }
        None => examples,
    };
    let predicted = model.predict(examples, EVAL_BATCH)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label.id()).collect();
    Metrics::from_predictions(model.n_labels(), &gold, &predicted)
}

/// One line of the fine-tuning log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_cls: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_aux: Option<f64>,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

/// 1-based epoch with the highest score; the earliest wins ties.
pub fn best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i + 1)
}

pub struct TrainOutcome<T: Real> {
    pub best_epoch: usize,
    pub best_params: ParamSet<T>,
    pub best_val: Metrics,
    pub log: Vec<EpochRecord>,
}

pub fn train_model<T: Real>(
    model: &mut TaskModel<T>,
    train: &[LasiExample],
    val: &[LasiExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_model_with(model, train, val, cfg, |_| {})
}

/// Fine-tunes `model` and leaves it holding the parameters of the epoch
/// with the best validation accuracy. `on_epoch` sees each log record.
pub fn train_model_with<T: Real>(
    model: &mut TaskModel<T>,
    train: &[LasiExample],
    val: &[LasiExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::NoExamples);
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamSet<T>, Metrics)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut cls, mut aux, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut any_aux = false;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LasiExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut params = std::mem::take(&mut model.params);
            let result = {
                let m = &*model;
                optimize(
                    &mut params,
                    &|n| m.trainable(n),
                    &mut state,
                    cfg,
                    (epoch, step + 1),
                    |g, bound| {
                        let o = m.batch_loss(g, bound, &batch, &mut Mode::Train(&mut rng))?;
                        Ok((o.loss_total, o.loss_cls, o.loss_aux))
                    },
                )
            };
            model.params = params;
            let l = result?;
            let w = batch.len() as f64;
            total += w * l.total;
            cls += w * l.cls;
            if let Some(a) = l.aux {
                aux += w * a;
                any_aux = true;
            }
            seen += batch.len();
        }
        let metrics = evaluate(model, val, None)?;
        let n = seen as f64;
        let record = EpochRecord {
            epoch,
            train_loss: total / n,
            loss_cls: cls / n,
            loss_aux: any_aux.then_some(aux / n),
            val_accuracy: metrics.accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(b, _, _)| metrics.accuracy > *b) {
            best = Some((metrics.accuracy, model.params.clone(), metrics));
        }
        log.push(record);
    }
    let scores: Vec<f64> = log.iter().map(|r| r.val_accuracy).collect();
    let best_epoch = best_epoch(&scores).expect("at least one epoch");
    let (_, best_params, best_val) = best.expect("at least one epoch");
    model.params = best_params.clone();
    Ok(TrainOutcome {
        best_epoch,
        best_params,
        best_val,
        log,
    })
}

/// Settings of the frozen-feature softmax classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 256,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl FeatureConfig {
    fn adam(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Multinomial logistic regression on fixed feature rows; returns the
/// `head.w`/`head.b` parameters.
pub fn fit_softmax<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    n_labels: usize,
    cfg: &FeatureConfig,
) -> Result<ParamSet<T>> {
    let adam = cfg.adam();
    adam.validate()?;
    let (n, width) = match features.shape() {
        &[n, w] if n == labels.len() && n > 0 => (n, w),
        s => {
            return Err(Error::Config(format!(
                "{} labels for features of shape {s:?}",
                labels.len()
            )))
        }
    };
    let mut rng = seeded_rng(cfg.seed);
    let mut params = ParamSet::new();
    ClassifierHead {
        input_width: width,
        n_labels,
    }
    .init(&mut params, "head", &mut rng);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rows = Vec::with_capacity(chunk.len() * width);
            for &i in chunk {
                rows.extend_from_slice(features.row(i));
            }
            let x = Tensor::new(vec![chunk.len(), width], rows)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            optimize(&mut params, &|_| true, &mut state, &adam, (epoch, step + 1), |g, b| {
                let xv = g.constant(x);
                let logits = classify(g, &b.scope("head"), xv)?;
                let loss = g.cross_entropy(logits, &y)?;
                Ok((loss, loss, None))
            })?;
        }
    }
    Ok(params)
}

/// Predicted class per feature row.
pub fn predict_softmax<T: Real>(head: &ParamSet<T>, features: &Tensor<T>) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let b = head.bind(&mut g, false);
    let x = g.constant(features.clone());
    let logits = classify(&mut g, &b.scope("head"), x)?;
    let l = g.value(logits);
    Ok((0..l.shape()[0]).map(|r| argmax(l.row(r))).collect())
}

/// Pooled `[CLS]` vectors of the window's context sentences, concatenated
/// per example. The encoder is only read.
pub fn extract_features<T: Real>(
    spec: &ModelSpec,
    encoder: &ParamSet<T>,
    window: &WindowSpec,
    examples: &[LasiExample],
) -> Result<Tensor<T>> {
    if spec.kind != ModelKind::Encoder {
        return Err(Error::Config("feature extraction needs an encoder".into()));
    }
    let d = spec.block.d_model;
    let width = d * window.offsets().len();
    let mut data = Vec::with_capacity(examples.len() * width);
    for ex in examples {
        for &o in window.offsets() {
            let c = ex.context(o).ok_or(Error::MissingContext(o))?;
            let mut g = Graph::new();
            let b = encoder.bind(&mut g, false);
            let e = bert_encode(&mut g, spec, &b.root(), trim_padding(&c.enc), &mut Mode::Eval)?;
            data.extend_from_slice(g.value(e.pooled).data());
        }
    }
    Ok(Tensor::new(vec![examples.len(), width], data)?)
}

pub struct FeatureFit<T: Real> {
    pub head: ParamSet<T>,
    pub train: Metrics,
    pub test: Metrics,
}

/// The feature-based baseline: a softmax classifier over frozen encoder
/// embeddings of the window.
pub fn feature_based_fit<T: Real>(
    spec: &ModelSpec,
    encoder: &ParamSet<T>,
    window: &WindowSpec,
    train: &[LasiExample],
    test: &[LasiExample],
    cfg: &FeatureConfig,
) -> Result<FeatureFit<T>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::NoExamples);
    }
    let gold = |ex: &[LasiExample]| ex.iter().map(|e| e.label.id()).collect::<Vec<_>>();
    let (ytr, yte) = (gold(train), gold(test));
    let xtr = extract_features(spec, encoder, window, train)?;
    let xte = extract_features(spec, encoder, window, test)?;
    let head = fit_softmax(&xtr, &ytr, spec.n_labels, cfg)?;
    let train_m = Metrics::from_predictions(spec.n_labels, &ytr, &predict_softmax(&head, &xtr)?)?;
    let test_m = Metrics::from_predictions(spec.n_labels, &yte, &predict_softmax(&head, &xte)?)?;
    Ok(FeatureFit {
        head,
        train: train_m,
        test: test_m,
    })
}

/// Language-model pretraining settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            epochs: 3,
            batch_size: 32,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Pretrains with the objective matching `spec.kind`: masked tokens for
/// the encoder, next tokens for the decoder, denoising for encoder-decoder.
/// Encoder sequences are `[CLS] … [SEP]`, the others `[BOS] … [EOS]`.
pub fn pretrain<T: Real>(
    spec: &ModelSpec,
    params: &mut ParamSet<T>,
    sequences: &[Vec<u32>],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    let adam = TrainConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    adam.validate()?;
    if sequences.is_empty() {
        return Err(Error::NoExamples);
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let l = optimize(params, &|_| true, &mut state, &adam, (epoch, step + 1), |g, b| {
                let p = b.root();
                let loss = match spec.kind {
                    ModelKind::Encoder => mlm_step(g, spec, &p, &batch, cfg.mask_rate, &mut rng)?,
                    ModelKind::Decoder => clm_step(g, spec, &p, &batch, &mut Mode::Train(&mut rng))?,
                    ModelKind::EncoderDecoder => {
                        denoise_step(g, spec, &p, &batch, cfg.mask_rate, &mut rng)?
                    }
                };
                Ok((loss, loss, None))
            })?;
            initial_loss.get_or_insert(l.total);
            sum += l.total;
            batches += 1;
        }
        epoch_loss.push(sum / batches as f64);
    }
    Ok(PretrainLog {
        initial_loss: initial_loss.expect("at least one batch"),
        epoch_loss,
    })
}
