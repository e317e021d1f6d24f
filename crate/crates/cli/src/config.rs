//! Experiment configuration: built-in defaults, overlaid by an optional TOML
//! file, overlaid by command-line flags. The effective configuration is
//! written next to every run.

use std::fs;
use std::path::{Path, PathBuf};

use lasi_core::corpus::{BoundaryPolicy, LabelPolicy, PerturbKind, PerturbationSpec, WindowSpec};
use lasi_core::models::{ModelKind, ModelSpec};
use lasi_core::nn::BlockConfig;
use lasi_core::stitching::StitchModelSpec;
use lasi_core::training::{FeatureConfig, PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: 2,
            max_size: 30_000,
        }
    }
}

/// Shape of the mini language models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BlockConfig::default();
        Self {
            d_model: b.d_model,
            n_heads: b.n_heads,
            d_ff: b.d_ff,
            n_layers: 2,
            dropout: b.dropout,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, kind: ModelKind, vocab_size: usize) -> ModelSpec {
        ModelSpec {
            block: BlockConfig {
                d_model: self.d_model,
                n_heads: self.n_heads,
                d_ff: self.d_ff,
                dropout: self.dropout,
                ..BlockConfig::default()
            },
            n_layers: self.n_layers,
            ..ModelSpec::new(kind, vocab_size)
        }
    }
}

/// Raw corpus files; relative paths resolve against `data_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub data_dir: Option<PathBuf>,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub label_policy: LabelPolicy,
    pub boundary: BoundaryPolicy,
    /// Keep only this many training examples (a fixed, seeded subsample).
    pub max_train_examples: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            train: "train.txt".into(),
            dev: "dev.txt".into(),
            test: "test.txt".into(),
            label_policy: LabelPolicy::Aliases,
            boundary: BoundaryPolicy::Skip,
            max_train_examples: None,
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, file: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if file.is_relative() => dir.join(file),
            _ => file.to_path_buf(),
        }
    }
}

pub fn default_windows() -> Vec<WindowSpec> {
    ["0", "-1", "-2,-1"]
        .iter()
        .map(|w| w.parse().expect("valid built-in window"))
        .collect()
}

/// The test-time noise rows: two and one words removed, one and two added.
pub fn default_perturbations(seed: u64) -> Vec<PerturbationSpec> {
    [
        (PerturbKind::RemoveWords, 2),
        (PerturbKind::RemoveWords, 1),
        (PerturbKind::AddNextWords, 1),
        (PerturbKind::AddNextWords, 2),
    ]
    .into_iter()
    .map(|(kind, n)| PerturbationSpec { kind, n, seed })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    /// Window of `finetune`; `ingest` writes shards for all of `windows`.
    pub window: WindowSpec,
    pub windows: Vec<WindowSpec>,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub feature: FeatureConfig,
    pub stitch: StitchModelSpec,
    pub perturbations: Vec<PerturbationSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: "lasi-work".into(),
            window: "-1".parse().expect("valid built-in window"),
            windows: default_windows(),
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            feature: FeatureConfig::default(),
            stitch: StitchModelSpec::default(),
            perturbations: default_perturbations(0),
        }
    }
}

impl ExperimentConfig {
    /// Defaults overlaid by `path`, when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Propagates the run seed into the sub-configurations.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.feature.seed = seed;
        for p in &mut self.perturbations {
            p.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.stitch.validate(self.model.d_model)?;
        self.model.spec(ModelKind::Encoder, 100).validate()?;
        if self.windows.is_empty() {
            return Err(CliError::Config("at least one window is required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_files_keep_remaining_defaults() {
        let c: ExperimentConfig = toml::from_str(
            "window = [-2, -1]\n[stitch]\naux_loss_weight = 0.1\n[train]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(c.window.offsets(), &[-2, -1]);
        assert_eq!(c.stitch.aux_loss_weight, 0.1);
        assert_eq!(c.stitch.gbas_heads, 8);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.learning_rate, 2e-5);
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut c = ExperimentConfig::default();
        c.set_seed(9);
        assert_eq!((c.pretrain.seed, c.train.seed, c.feature.seed), (9, 9, 9));
        assert!(c.perturbations.iter().all(|p| p.seed == 9));
    }
}
