use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document, Label, Result};

/// Count, mean, sample standard deviation and range of a quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Summary {
            n,
            mean,
            sd,
            min,
            max,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub sentences: usize,
    pub sentences_per_doc: Summary,
    pub words_per_sentence: Summary,
    /// Sentences of each section per document, over documents containing it.
    pub per_section: Vec<(Label, Summary)>,
}

impl CorpusStats {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>8} {:>8} {:>6} {:>6}",
            "", "N", "mean", "sd", "min", "max"
        );
        let mut row = |name: &str, s: &Summary| {
            let _ = writeln!(
                out,
                "{:<22} {:>8} {:>8.2} {:>8.2} {:>6} {:>6}",
                name, s.n, s.mean, s.sd, s.min, s.max
            );
        };
        row("Sent./Doc", &self.sentences_per_doc);
        for (label, s) in &self.per_section {
            row(&format!("Sent./{label}"), s);
        }
        row("Words/Sent.", &self.words_per_sentence);
        out
    }
}

/// Table-1 style summary. Words are whitespace-delimited.
pub fn corpus_stats(docs: &[Document]) -> Result<CorpusStats> {
    if docs.is_empty() {
        return Err(CorpusError::Empty);
    }
    let per_doc: Vec<f64> = docs.iter().map(|d| d.sentences.len() as f64).collect();
    let words: Vec<f64> = docs
        .iter()
        .flat_map(|d| &d.sentences)
        .map(|s| s.text.split_whitespace().count() as f64)
        .collect();
    let per_section = Label::ALL
        .iter()
        .filter_map(|&label| {
            let counts: Vec<f64> = docs
                .iter()
                .map(|d| d.sentences.iter().filter(|s| s.label == label).count())
                .filter(|&c| c > 0)
                .map(|c| c as f64)
                .collect();
            Summary::of(&counts).map(|s| (label, s))
        })
        .collect();
    Ok(CorpusStats {
        documents: docs.len(),
        sentences: words.len(),
        sentences_per_doc: Summary::of(&per_doc).ok_or(CorpusError::Empty)?,
        words_per_sentence: Summary::of(&words).ok_or(CorpusError::Empty)?,
        per_section,
    })
}
