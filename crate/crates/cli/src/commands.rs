//! The five pipeline commands. Each returns the text it reports to the user.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lasi_core::corpus::{
    corpus_stats, encode_sentence, make_examples, parse_rct, read_shard, write_documents,
    write_shard, DocIndex, Document, EncodeStyle, LasiExample, PerturbKind, ShardHeader, Vocab,
    WindowSpec,
};
use lasi_core::models::{load_checkpoint, save_checkpoint, ModelKind, ModelSpec};
use lasi_core::params::ParamSet;
use lasi_core::task::{Pretrained, TaskKind, TaskMeta, TaskModel};
use lasi_core::tensor::Real;
use lasi_core::training::{
    evaluate as evaluate_model, extract_features, feature_based_fit, predict_softmax,
    pretrain as pretrain_model, train_model_with, Metrics, Precision, PretrainLog,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::report;
use crate::workspace::{
    load_docs, model_name, write_text, EvalRecord, RunManifest, Workspace, SPLITS,
};

pub const ORIGINAL: &str = "original";
pub const FEATURE_BASED: &str = "feature_based";

/// Paths of the three raw corpus files.
#[derive(Clone, Debug)]
pub struct IngestInputs {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

impl IngestInputs {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let d = &cfg.data;
        Self {
            train: d.resolve(&d.train),
            dev: d.resolve(&d.dev),
            test: d.resolve(&d.test),
        }
    }

    fn get(&self, split: &str) -> &Path {
        match split {
            "train" => &self.train,
            "dev" => &self.dev,
            _ => &self.test,
        }
    }
}

fn shard_header(vocab: &Vocab, window: &WindowSpec, split: &str) -> ShardHeader {
    ShardHeader {
        format: lasi_core::corpus::SHARD_FORMAT.to_string(),
        vocab_hash: vocab.hash(),
        window: window.clone(),
        split: split.to_string(),
        count: 0,
    }
}

/// Parses the corpus, builds the vocabulary from the training split and
/// writes documents, one shard per split and window, and corpus statistics.
pub fn ingest(cfg: &ExperimentConfig, inputs: &IngestInputs) -> Result<String> {
    let started = Instant::now();
    let ws = Workspace::new(&cfg.work_dir);
    let _lock = ws.lock()?;
    let mut docs: BTreeMap<&str, Vec<Document>> = BTreeMap::new();
    for split in SPLITS {
        let path = inputs.get(split);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "{split} file {} not found",
                path.display()
            )));
        }
        docs.insert(split, parse_rct(path, cfg.data.label_policy)?);
    }
    let vocab = Vocab::build(&docs["train"], cfg.vocab.min_freq, cfg.vocab.max_size)?;
    vocab.save(&ws.vocab())?;

    let mut manifest = RunManifest::new("ingest", "ingest".into(), "none".into(), cfg);
    manifest.vocab_hash = vocab.hash();
    let mut out = String::new();
    for split in SPLITS {
        let path = ws.docs(split);
        crate::workspace::ensure_parent(&path)?;
        write_documents(&path, &docs[split])?;
        manifest
            .dataset
            .insert(format!("{split}.documents"), docs[split].len());
        for window in &cfg.windows {
            let ex = make_examples(&docs[split], window, &vocab, cfg.data.boundary);
            let path = ws.shard(split, window);
            crate::workspace::ensure_parent(&path)?;
            write_shard(&path, &shard_header(&vocab, window, split), &ex)?;
            manifest
                .dataset
                .insert(format!("{split}.{}", window.name()), ex.len());
            let _ = writeln!(out, "wrote {} ({} examples)", path.display(), ex.len());
        }
    }

    let all: Vec<Document> = SPLITS
        .iter()
        .flat_map(|s| docs[s].iter().cloned())
        .collect();
    let mut stats = BTreeMap::new();
    let mut text = String::new();
    for (name, set) in [
        ("all", &all[..]),
        ("train", &docs["train"][..]),
        ("dev", &docs["dev"][..]),
        ("test", &docs["test"][..]),
    ] {
        let s = corpus_stats(set)?;
        let _ = writeln!(
            text,
            "== {name}: {} documents, {} sentences",
            s.documents, s.sentences
        );
        text.push_str(&s.render());
        text.push('\n');
        stats.insert(name, s);
    }
    write_text(&ws.stats("txt"), &text)?;
    write_text(
        &ws.stats("json"),
        &(serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n"),
    )?;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.save(&ws.root().join("ingest.json"))?;
    let _ = writeln!(
        out,
        "vocabulary: {} tokens, hash {}",
        vocab.len(),
        vocab.hash()
    );
    out.push_str(&text);
    Ok(out)
}

fn load_vocab(ws: &Workspace) -> Result<Vocab> {
    let path = ws.vocab();
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run `lasi ingest` first",
            path.display()
        )));
    }
    Ok(Vocab::load(&path)?)
}

/// Metadata stored with a pretrained language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMeta {
    pub spec: ModelSpec,
    pub vocab_hash: String,
    pub log: PretrainLog,
}

#[derive(Serialize)]
struct LossLine {
    epoch: usize,
    loss: f64,
}

/// Pretrains one mini language model on the training sentences.
pub fn pretrain(cfg: &ExperimentConfig, kind: ModelKind) -> Result<String> {
    match cfg.train.precision {
        Precision::F32 => pretrain_as::<f32>(cfg, kind),
        Precision::F64 => pretrain_as::<f64>(cfg, kind),
    }
}

fn pretrain_as<T: Real>(cfg: &ExperimentConfig, kind: ModelKind) -> Result<String> {
    let started = Instant::now();
    let ws = Workspace::new(&cfg.work_dir);
    let _lock = ws.lock()?;
    let vocab = load_vocab(&ws)?;
    let docs = load_docs(&ws, "train")?;
    let style = match kind {
        ModelKind::Encoder => EncodeStyle::Encoder,
        _ => EncodeStyle::Decoder,
    };
    let sequences: Vec<Vec<u32>> = docs
        .iter()
        .flat_map(|d| d.sentences.iter())
        .map(|s| encode_sentence(&vocab, &s.text, style))
        .collect();
    let spec = cfg.model.spec(kind, vocab.len());
    spec.validate()?;
    let mut params = spec.init::<T>(cfg.seed);
    let log = pretrain_model(&spec, &mut params, &sequences, &cfg.pretrain)?;

    let path = ws.checkpoint(kind);
    crate::workspace::ensure_parent(&path)?;
    let meta = PretrainMeta {
        spec,
        vocab_hash: vocab.hash(),
        log: log.clone(),
    };
    save_checkpoint(&path, &params.cast::<f32>(), &meta)?;
    let mut curve = serde_json::to_string(&LossLine {
        epoch: 0,
        loss: log.initial_loss,
    })
    .expect("serializes")
        + "\n";
    for (i, &loss) in log.epoch_loss.iter().enumerate() {
        curve +=
            &(serde_json::to_string(&LossLine { epoch: i + 1, loss }).expect("serializes") + "\n");
    }
    write_text(&path.with_extension("loss.jsonl"), &curve)?;

    let mut manifest = RunManifest::new(
        "pretrain",
        model_name(kind).into(),
        model_name(kind).into(),
        cfg,
    );
    manifest.vocab_hash = vocab.hash();
    manifest
        .dataset
        .insert("train.sentences".into(), sequences.len());
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.save(&path.with_extension("manifest.json"))?;
    Ok(format!(
        "pretrained {} on {} sentences: loss {:.4} -> {:.4}\nwrote {}\n",
        model_name(kind),
        sequences.len(),
        log.initial_loss,
        log.epoch_loss.last().copied().unwrap_or(log.initial_loss),
        path.display()
    ))
}

/// Model choice of `finetune`: a task kind or the frozen-feature baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Task(TaskKind),
    FeatureBased,
}

impl std::str::FromStr for ModelChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            FEATURE_BASED | "feature" => Ok(ModelChoice::FeatureBased),
            _ => s.parse::<TaskKind>().map(ModelChoice::Task).map_err(|_| {
                CliError::Config(format!(
                    "unknown model `{s}` (expected one of {}, {FEATURE_BASED})",
                    TaskKind::ALL.map(|k| k.as_str()).join(", ")
                ))
            }),
        }
    }
}

impl ModelChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Task(k) => k.as_str(),
            ModelChoice::FeatureBased => FEATURE_BASED,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelChoice::Task(k) => k.display_name(),
            ModelChoice::FeatureBased => "Feature-based",
        }
    }

    fn needs(self) -> &'static [ModelKind] {
        match self {
            ModelChoice::Task(k) => k.needs(),
            ModelChoice::FeatureBased => &[ModelKind::Encoder],
        }
    }

    /// Rejects windows that are invalid for this model before any loading.
    pub fn validate_window(self, window: &WindowSpec, cfg: &ExperimentConfig) -> Result<()> {
        match self {
            ModelChoice::Task(k) => Ok(k.validate_window(window, &cfg.stitch)?),
            ModelChoice::FeatureBased => Ok(()),
        }
    }
}

pub fn default_run_name(model: ModelChoice, window: &WindowSpec) -> String {
    format!("{}-{}", model.as_str(), window.name())
}

/// Frozen-feature baseline: encoder and softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub window: WindowSpec,
    pub encoder: ModelSpec,
    pub vocab_hash: String,
}

/// Metadata of a fine-tuned checkpoint; exactly one field is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureMeta>,
}

impl RunCheckpoint {
    fn vocab_hash(&self) -> Result<&str> {
        match (&self.task, &self.feature) {
            (Some(t), None) => Ok(&t.vocab_hash),
            (None, Some(f)) => Ok(&f.vocab_hash),
            _ => Err(CliError::Data("checkpoint metadata names no model".into())),
        }
    }

    fn window(&self) -> &WindowSpec {
        match (&self.task, &self.feature) {
            (Some(t), _) => &t.window,
            (_, Some(f)) => &f.window,
            _ => unreachable!("checked by vocab_hash"),
        }
    }
}

fn load_pretrained(
    ws: &Workspace,
    kind: ModelKind,
    vocab_hash: &str,
) -> Result<(ModelSpec, ParamSet<f32>)> {
    let path = ws.checkpoint(kind);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "missing pretrained checkpoint {}; run `lasi pretrain --kind {}` first",
            path.display(),
            model_name(kind)
        )));
    }
    let (params, meta): (ParamSet<f32>, PretrainMeta) = load_checkpoint(&path)?;
    if meta.vocab_hash != vocab_hash {
        return Err(CliError::Data(format!(
            "{} was pretrained with vocabulary {}, shards use {vocab_hash}",
            path.display(),
            meta.vocab_hash
        )));
    }
    Ok((meta.spec, params))
}

fn load_split(
    ws: &Workspace,
    split: &str,
    window: &WindowSpec,
    vocab_hash: &str,
) -> Result<Vec<LasiExample>> {
    let path = ws.shard(split, window);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run `lasi ingest --window {}` first",
            path.display(),
            window
        )));
    }
    let (header, examples) = read_shard(&path)?;
    if header.vocab_hash != vocab_hash {
        return Err(CliError::Data(format!(
            "{}: vocabulary hash {} does not match {vocab_hash}",
            path.display(),
            header.vocab_hash
        )));
    }
    Ok(examples)
}

/// Evenly spaced, order-preserving subsample of at most `n` examples.
pub fn subsample<T: Clone>(items: &[T], n: Option<usize>) -> Vec<T> {
    match n {
        Some(n) if n < items.len() => (0..n).map(|i| items[i * items.len() / n].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Fine-tunes one model on the training shard, selecting the epoch with the
/// best development accuracy, and writes the run directory.
pub fn finetune(
    cfg: &ExperimentConfig,
    model: ModelChoice,
    run_name: Option<&str>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let window = &cfg.window;
    model.validate_window(window, cfg)?;
    match cfg.train.precision {
        Precision::F32 => finetune_as::<f32>(cfg, model, window, run_name),
        Precision::F64 => finetune_as::<f64>(cfg, model, window, run_name),
    }
}

fn finetune_as<T: Real>(
    cfg: &ExperimentConfig,
    model: ModelChoice,
    window: &WindowSpec,
    run_name: Option<&str>,
) -> Result<PathBuf> {
    let started = Instant::now();
    let ws = Workspace::new(&cfg.work_dir);
    let _lock = ws.lock()?;
    let vocab = load_vocab(&ws)?;
    let hash = vocab.hash();
    let mut pre: Vec<(ModelKind, ModelSpec, ParamSet<T>)> = Vec::new();
    for &k in model.needs() {
        let (spec, p) = load_pretrained(&ws, k, &hash)?;
        pre.push((k, spec, p.cast()));
    }
    let get = |k: ModelKind| pre.iter().find(|e| e.0 == k).map(|(_, s, p)| (*s, p));
    let train = subsample(
        &load_split(&ws, "train", window, &hash)?,
        cfg.data.max_train_examples,
    );
    let dev = load_split(&ws, "dev", window, &hash)?;

    let name = run_name.map_or_else(|| default_run_name(model, window), str::to_string);
    let dir = ws.run_dir(&name);
    let mut manifest = RunManifest::new(
        "finetune",
        model.display_name().into(),
        model.as_str().into(),
        cfg,
    );
    manifest.window = Some(window.clone());
    manifest.vocab_hash = hash.clone();
    manifest.dataset.insert("train".into(), train.len());
    manifest.dataset.insert("dev".into(), dev.len());

    let (params, meta) = match model {
        ModelChoice::Task(kind) => {
            let mut m = TaskModel::new(
                kind,
                window.clone(),
                cfg.stitch,
                Pretrained {
                    bert: get(ModelKind::Encoder),
                    gpt: get(ModelKind::Decoder),
                    encdec: get(ModelKind::EncoderDecoder),
                },
                hash.clone(),
                cfg.seed,
            )?;
            let mut log_text = String::new();
            let outcome = train_model_with(&mut m, &train, &dev, &cfg.train, |r| {
                eprintln!(
                    "[{name}] epoch {} loss {:.4} val acc {:.4}",
                    r.epoch, r.train_loss, r.val_accuracy
                );
            })?;
            for r in &outcome.log {
                log_text += &(serde_json::to_string(r).expect("record serializes") + "\n");
            }
            write_text(&dir.join("epochs.jsonl"), &log_text)?;
            manifest.best_epoch = Some(outcome.best_epoch);
            manifest.validation = Some(outcome.best_val);
            (
                outcome.best_params,
                RunCheckpoint {
                    task: Some(m.meta.clone()),
                    feature: None,
                },
            )
        }
        ModelChoice::FeatureBased => {
            let (spec, encoder) = get(ModelKind::Encoder).expect("loaded above");
            let fit = feature_based_fit(&spec, encoder, window, &train, &dev, &cfg.feature)?;
            manifest.validation = Some(fit.test);
            let mut p = fit.head;
            p.absorb("bert", encoder);
            (
                p,
                RunCheckpoint {
                    task: None,
                    feature: Some(FeatureMeta {
                        window: window.clone(),
                        encoder: spec,
                        vocab_hash: hash.clone(),
                    }),
                },
            )
        }
    };
    let best = dir.join("best.toml");
    crate::workspace::ensure_parent(&best)?;
    save_checkpoint(&best, &params.cast::<f32>(), &meta)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.save(&dir.join("manifest.json"))?;
    Ok(dir)
}

/// A loaded fine-tuned classifier.
pub enum Classifier<T: Real> {
    Task(TaskModel<T>),
    Feature {
        spec: ModelSpec,
        window: WindowSpec,
        encoder: ParamSet<T>,
        head: ParamSet<T>,
    },
}

impl<T: Real> Classifier<T> {
    pub fn load(checkpoint: &Path) -> Result<(Self, RunCheckpoint)> {
        let (params, meta): (ParamSet<f32>, RunCheckpoint) = load_checkpoint(checkpoint)?;
        meta.vocab_hash()?;
        let params = params.cast::<T>();
        let c = match (&meta.task, &meta.feature) {
            (Some(t), _) => Classifier::Task(TaskModel::from_parts(t.clone(), params)?),
            (_, Some(f)) => Classifier::Feature {
                spec: f.encoder,
                window: f.window.clone(),
                encoder: params.extract("bert"),
                head: {
                    let mut h = ParamSet::new();
                    h.absorb("head", &params.extract("head"));
                    h
                },
            },
            _ => unreachable!("checked by vocab_hash"),
        };
        Ok((c, meta))
    }

    pub fn metrics(&self, examples: &[LasiExample]) -> Result<Metrics> {
        match self {
            Classifier::Task(m) => Ok(evaluate_model(m, examples, None)?),
            Classifier::Feature {
                spec,
                window,
                encoder,
                head,
            } => {
                let x = extract_features(spec, encoder, window, examples)?;
                let pred = predict_softmax(head, &x)?;
                let gold: Vec<usize> = examples.iter().map(|e| e.label.id()).collect();
                Ok(Metrics::from_predictions(spec.n_labels, &gold, &pred)?)
            }
        }
    }
}

/// Rows in table order: removals (most words first), original, additions.
fn ordered_perturbations(
    cfg: &ExperimentConfig,
) -> (
    Vec<lasi_core::corpus::PerturbationSpec>,
    Vec<lasi_core::corpus::PerturbationSpec>,
) {
    let mut remove: Vec<_> = cfg
        .perturbations
        .iter()
        .copied()
        .filter(|p| p.kind == PerturbKind::RemoveWords)
        .collect();
    let mut add: Vec<_> = cfg
        .perturbations
        .iter()
        .copied()
        .filter(|p| p.kind == PerturbKind::AddNextWords)
        .collect();
    remove.sort_by(|a, b| b.n.cmp(&a.n));
    add.sort_by_key(|p| p.n);
    (remove, add)
}

/// Evaluates a run on the test shard, once unperturbed and once per
/// configured perturbation, and records the rows in the run manifest.
pub fn evaluate(cfg: &ExperimentConfig, run: &Path, perturb: bool) -> Result<Vec<EvalRecord>> {
    let manifest_path = run.join("manifest.json");
    let mut manifest = RunManifest::load(&manifest_path)?;
    let precision = manifest.config.train.precision;
    match precision {
        Precision::F32 => evaluate_as::<f32>(cfg, run, &mut manifest, perturb),
        Precision::F64 => evaluate_as::<f64>(cfg, run, &mut manifest, perturb),
    }?;
    manifest.save(&manifest_path)?;
    Ok(manifest.results)
}

fn evaluate_as<T: Real>(
    cfg: &ExperimentConfig,
    run: &Path,
    manifest: &mut RunManifest,
    perturb: bool,
) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(&cfg.work_dir);
    let _lock = ws.lock()?;
    let (model, meta) = Classifier::<T>::load(&run.join("best.toml"))?;
    let hash = meta.vocab_hash()?.to_string();
    let vocab = load_vocab(&ws)?;
    if vocab.hash() != hash {
        return Err(CliError::Data(format!(
            "run {} was trained with vocabulary {hash}, {} has {}",
            run.display(),
            ws.vocab().display(),
            vocab.hash()
        )));
    }
    let test = load_split(&ws, "test", meta.window(), &hash)?;
    let docs = load_docs(&ws, "test")?;
    let index = DocIndex::new(&docs);

    let perturbed = |spec: &lasi_core::corpus::PerturbationSpec| -> Result<Vec<LasiExample>> {
        test.iter()
            .map(|e| spec.apply(&vocab, e, &index).map_err(CliError::from))
            .collect()
    };
    let mut rows = Vec::new();
    let (remove, add) = if perturb {
        ordered_perturbations(cfg)
    } else {
        Default::default()
    };
    for p in &remove {
        rows.push(EvalRecord {
            row: p.label(),
            metrics: model.metrics(&perturbed(p)?)?,
        });
    }
    rows.push(EvalRecord {
        row: ORIGINAL.into(),
        metrics: model.metrics(&test)?,
    });
    for p in &add {
        rows.push(EvalRecord {
            row: p.label(),
            metrics: model.metrics(&perturbed(p)?)?,
        });
    }
    let rows_table: Vec<report::Row> = rows
        .iter()
        .map(|r| {
            report::Row::new(
                r.row.clone(),
                manifest
                    .window
                    .as_ref()
                    .map_or(String::new(), |w| w.to_string()),
                &r.metrics,
            )
        })
        .collect();
    write_text(
        &run.join("evaluation.txt"),
        &report::render_text(&rows_table),
    )?;
    write_text(&run.join("evaluation.csv"), &report::to_csv(&rows_table)?)?;
    manifest.dataset.insert("test".into(), test.len());
    manifest.results = rows;
    manifest.wall_seconds += started.elapsed().as_secs_f64();
    Ok(())
}

/// Comparison tables over evaluated runs, in manifest order. Writes
/// `report.txt` and `report.csv` into `out` when given.
pub fn report(manifests: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if manifests.is_empty() {
        return Err(CliError::Config(
            "report needs at least one manifest".into(),
        ));
    }
    let mut loaded = Vec::with_capacity(manifests.len());
    for p in manifests {
        let p = if p.is_dir() {
            p.join("manifest.json")
        } else {
            p.clone()
        };
        loaded.push(RunManifest::load(&p)?);
    }
    let mut rows = Vec::new();
    for m in &loaded {
        let metrics = m.original().ok_or_else(|| {
            CliError::Data(format!(
                "run `{}` has no evaluation results; run `lasi evaluate` first",
                m.name
            ))
        })?;
        let window = m.window.as_ref().map_or(String::new(), |w| w.to_string());
        rows.push(report::Row::new(m.name.clone(), window, metrics));
    }
    let mut text = report::render_text(&rows);
    let perturbed = report::render_perturbation_table(&loaded);
    if let Some(t) = &perturbed {
        text.push('\n');
        text.push_str(t);
    }
    if let Some(dir) = out {
        write_text(&dir.join("report.txt"), &text)?;
        write_text(&dir.join("report.csv"), &report::to_csv(&rows)?)?;
    }
    Ok(text)
}
