//! On-disk layout of a working directory and its single-writer lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use lasi_core::corpus::{Document, WindowSpec};
use lasi_core::models::ModelKind;
use lasi_core::training::Metrics;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn docs(&self, split: &str) -> PathBuf {
        self.root.join("docs").join(format!("{split}.jsonl"))
    }

    pub fn shard(&self, split: &str, window: &WindowSpec) -> PathBuf {
        self.root
            .join("shards")
            .join(format!("{split}.{}.jsonl", window.name()))
    }

    pub fn stats(&self, ext: &str) -> PathBuf {
        self.root.join(format!("stats.{ext}"))
    }

    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.toml", model_name(kind)))
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    /// Takes the working-directory lock, failing if another command holds it.
    pub fn lock(&self) -> Result<Lock> {
        fs::create_dir_all(&self.root).map_err(CliError::io(&self.root))?;
        let path = self.root.join(".lasi.lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::Config(format!(
                    "{} is locked by another command (remove {} if stale)",
                    self.root.display(),
                    path.display()
                )),
                _ => CliError::Io {
                    path: path.clone(),
                    source: e,
                },
            })?;
        writeln!(f, "{}", std::process::id()).map_err(CliError::io(&path))?;
        Ok(Lock { path })
    }
}

pub fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Encoder => "encoder",
        ModelKind::Decoder => "decoder",
        ModelKind::EncoderDecoder => "encdec",
    }
}

pub fn parse_model_kind(s: &str) -> Result<ModelKind> {
    match s {
        "encoder" | "bert" => Ok(ModelKind::Encoder),
        "decoder" | "gpt" => Ok(ModelKind::Decoder),
        "encdec" | "bart" => Ok(ModelKind::EncoderDecoder),
        _ => Err(CliError::Config(format!(
            "unknown pretraining kind `{s}` (expected encoder, decoder or encdec)"
        ))),
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn load_docs(ws: &Workspace, split: &str) -> Result<Vec<Document>> {
    let path = ws.docs(split);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run `lasi ingest` first",
            path.display()
        )));
    }
    Ok(lasi_core::corpus::read_documents(&path)?)
}

/// One evaluated row, e.g. `original` or `-2 words`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub row: String,
    pub metrics: Metrics,
}

pub const RUN_FORMAT: &str = "lasi-run-1";

/// Everything needed to re-run a command on the same data files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    /// Row name in reports.
    pub name: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    pub config: ExperimentConfig,
    pub vocab_hash: String,
    pub build: String,
    pub dataset: BTreeMap<String, usize>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    /// Validation metrics of the selected epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Metrics>,
    /// Test metrics, one record per evaluated condition.
    #[serde(default)]
    pub results: Vec<EvalRecord>,
}

impl RunManifest {
    pub fn new(command: &str, name: String, model: String, config: &ExperimentConfig) -> Self {
        Self {
            format: RUN_FORMAT.to_string(),
            command: command.to_string(),
            name,
            model,
            window: None,
            config: config.clone(),
            vocab_hash: String::new(),
            build: build_id(),
            dataset: BTreeMap::new(),
            wall_seconds: 0.0,
            best_epoch: None,
            validation: None,
            results: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(path, &(text + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("malformed manifest {}: {e}", path.display())))?;
        if m.format != RUN_FORMAT {
            return Err(CliError::Data(format!(
                "{}: unsupported manifest format `{}`",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    /// Test metrics of the unperturbed condition, if evaluated.
    pub fn original(&self) -> Option<&Metrics> {
        self.results
            .iter()
            .find(|r| r.row == crate::commands::ORIGINAL)
            .map(|r| &r.metrics)
    }
}

pub fn build_id() -> String {
    format!(
        "lasi {}{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("LASI_BUILD_ID")
            .map(|id| format!(" ({id})"))
            .unwrap_or_default()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let lock = ws.lock().unwrap();
        let err = ws.lock().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        drop(lock);
        assert!(ws.lock().is_ok());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = RunManifest::new(
            "finetune",
            "GBLS".into(),
            "gbls".into(),
            &ExperimentConfig::default(),
        );
        m.window = Some("-2,-1".parse().unwrap());
        m.results.push(EvalRecord {
            row: "original".into(),
            metrics: Metrics::from_confusion(vec![vec![2, 1], vec![0, 3]]).unwrap(),
        });
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        fs::write(&path, "{").unwrap();
        assert_eq!(RunManifest::load(&path).unwrap_err().exit_code(), 3);
    }
}
