//! Command-line surface. Flags override the configuration file, which
//! overrides the built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lasi_core::corpus::WindowSpec;
use lasi_core::training::Precision;

use crate::commands::{self, IngestInputs, ModelChoice};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::workspace::parse_model_kind;

#[derive(Debug, Parser)]
#[command(
    name = "lasi",
    version,
    about = "Look-ahead section identification experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Working directory for vocabulary, shards, checkpoints and runs.
    #[arg(long, global = true)]
    pub work: Option<PathBuf>,
    /// Directory that relative corpus paths resolve against.
    #[arg(long, global = true, env = "LASI_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the corpus; write vocabulary, example shards and statistics.
    Ingest {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Context window such as `-2,-1`; repeat for several shards.
        #[arg(long = "window", allow_hyphen_values = true)]
        windows: Vec<WindowSpec>,
        #[arg(long)]
        min_freq: Option<usize>,
    },
    /// Pretrain a mini language model on the training sentences.
    Pretrain {
        /// encoder, decoder, encdec or all
        #[arg(long)]
        kind: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Fine-tune a classifier and keep the epoch with the best dev accuracy.
    Finetune {
        /// bert, gpt, encdec, bert_of_gpt, gpt_plus_bert, gbls, gbas or feature_based
        #[arg(long)]
        model: String,
        #[arg(long, allow_hyphen_values = true)]
        window: Option<WindowSpec>,
        #[arg(long)]
        aux_weight: Option<f64>,
        #[arg(long)]
        mask_rate: Option<f64>,
        #[arg(long)]
        gbas_heads: Option<usize>,
        #[arg(long)]
        gen_tokens: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_train_examples: Option<usize>,
        /// Run directory name under `runs/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a run on the test shard, with and without perturbations.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Only evaluate the unperturbed test set.
        #[arg(long)]
        no_perturb: bool,
    },
    /// Compare evaluated runs.
    Report {
        /// Run manifests or run directories.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Directory for report.txt and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Cli {
    /// Defaults, then the configuration file, then flags.
    pub fn effective_config(&self) -> Result<ExperimentConfig> {
        let g = &self.global;
        let mut cfg = ExperimentConfig::load(g.config.as_deref())?;
        set(&mut cfg.work_dir, g.work.clone());
        if g.data_dir.is_some() {
            cfg.data.data_dir = g.data_dir.clone();
        }
        if let Some(seed) = g.seed {
            cfg.set_seed(seed);
        }
        set(&mut cfg.train.precision, g.precision);
        match &self.command {
            Command::Ingest {
                train,
                dev,
                test,
                windows,
                min_freq,
            } => {
                set(&mut cfg.data.train, train.clone());
                set(&mut cfg.data.dev, dev.clone());
                set(&mut cfg.data.test, test.clone());
                if !windows.is_empty() {
                    cfg.windows = windows.clone();
                }
                set(&mut cfg.vocab.min_freq, *min_freq);
            }
            Command::Pretrain {
                epochs,
                lr,
                batch_size,
                ..
            } => {
                set(&mut cfg.pretrain.epochs, *epochs);
                set(&mut cfg.pretrain.learning_rate, *lr);
                set(&mut cfg.pretrain.batch_size, *batch_size);
            }
            Command::Finetune {
                window,
                aux_weight,
                mask_rate,
                gbas_heads,
                gen_tokens,
                epochs,
                lr,
                batch_size,
                max_train_examples,
                ..
            } => {
                set(&mut cfg.window, window.clone());
                set(&mut cfg.stitch.aux_loss_weight, *aux_weight);
                set(&mut cfg.stitch.bert_input_mask_rate, *mask_rate);
                set(&mut cfg.stitch.gbas_heads, *gbas_heads);
                set(&mut cfg.stitch.gen_tokens, *gen_tokens);
                set(&mut cfg.train.epochs, *epochs);
                set(&mut cfg.train.learning_rate, *lr);
                set(&mut cfg.train.batch_size, *batch_size);
                if max_train_examples.is_some() {
                    cfg.data.max_train_examples = *max_train_examples;
                }
            }
            Command::Evaluate { .. } | Command::Report { .. } => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the parsed command and returns its report text.
pub fn run(cli: &Cli) -> Result<String> {
    if let Command::Report { manifests, out } = &cli.command {
        return commands::report(manifests, out.as_deref());
    }
    let cfg = cli.effective_config()?;
    match &cli.command {
        Command::Ingest { .. } => commands::ingest(&cfg, &IngestInputs::from_config(&cfg)),
        Command::Pretrain { kind, .. } => {
            let kinds = if kind == "all" {
                vec!["encoder", "decoder", "encdec"]
            } else {
                vec![kind.as_str()]
            };
            let mut out = String::new();
            for k in kinds {
                out += &commands::pretrain(&cfg, parse_model_kind(k)?)?;
            }
            Ok(out)
        }
        Command::Finetune { model, name, .. } => {
            let choice: ModelChoice = model.parse()?;
            let dir = commands::finetune(&cfg, choice, name.as_deref())?;
            let m = crate::workspace::RunManifest::load(&dir.join("manifest.json"))?;
            let val = m.validation.as_ref().map_or(String::new(), |v| {
                format!(", dev accuracy {:.4}", v.accuracy)
            });
            let epoch = m
                .best_epoch
                .map_or(String::new(), |e| format!(", best epoch {e}"));
            Ok(format!("wrote {}{epoch}{val}\n", dir.display()))
        }
        Command::Evaluate { run, no_perturb } => {
            let rows = commands::evaluate(&cfg, run, !no_perturb)?;
            let table: Vec<_> = rows
                .iter()
                .map(|r| crate::report::Row::new(r.row.clone(), cfg.window.to_string(), &r.metrics))
                .collect();
            std::fs::read_to_string(run.join("evaluation.txt"))
                .or_else(|_| Ok(crate::report::render_text(&table)))
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

/// Maps a clap failure (other than help/version) to a configuration error.
pub fn parse_error(e: clap::Error) -> CliError {
    CliError::Config(e.to_string())
}
