//! The `lasi` experiment pipeline: ingest a PubMed-RCT style corpus,
//! pretrain mini language models, fine-tune section classifiers, evaluate
//! them under test-time perturbations and compare runs.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod workspace;

pub use error::{CliError, Result};
