//! PubMed-RCT ingestion, vocabulary, example windows and test-time noise.
//!
//! The input grammar is the plain-text release of the corpus:
//!
//! ```text
//! ###24491034
//! BACKGROUND<TAB>The emergence of ...
//! OBJECTIVE<TAB>To evaluate ...
//!
//! ###24633889
//! ...
//! ```

mod shard;
mod stats;
mod synthetic;
mod vocab;
mod window;

pub use shard::{
    read_documents, read_shard, write_documents, write_shard, ShardHeader, SHARD_FORMAT,
};
pub use stats::{corpus_stats, CorpusStats, Summary};
pub use synthetic::synthetic_rct;
pub use vocab::{
    encode_sentence, frame, tokenize, EncodeStyle, Vocab, BOS, CLS, EOS, MASK, NUM_SPECIALS, PAD,
    SEP, SEQ_LEN, SPECIAL_TOKENS, UNK,
};
pub use window::{
    make_examples, mask_tokens, perturb_add_next, perturb_remove, perturbation_seed,
    BoundaryPolicy, Context, DocIndex, LasiExample, PerturbKind, PerturbationSpec, TargetSentence,
    WindowSpec,
};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}line {line}: {kind}", path_prefix(.path))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        kind: ParseErrorKind,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Shard {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("document {doc_id} has no sentence {k}")]
    MissingDocument { doc_id: String, k: usize },
    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
}

fn path_prefix(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| format!("{}: ", p.display()))
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownLabel(String),
    SentenceBeforeHeader,
    MissingTab,
    EmptyDocument(String),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownLabel(l) => write!(f, "unknown label `{l}`"),
            Self::SentenceBeforeHeader => f.write_str("sentence line before any ### header"),
            Self::MissingTab => f.write_str("malformed line, expected LABEL<TAB>text"),
            Self::EmptyDocument(id) => write!(f, "document {id} has no sentences"),
        }
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Section labels, in label-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Background,
    Objective,
    Method,
    Result,
    Conclusion,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::Background,
        Label::Objective,
        Label::Method,
        Label::Result,
        Label::Conclusion,
    ];
    pub const COUNT: usize = 5;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Label> {
        Self::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Background => "BACKGROUND",
            Label::Objective => "OBJECTIVE",
            Label::Method => "METHOD",
            Label::Result => "RESULT",
            Label::Conclusion => "CONCLUSION",
        }
    }

    /// Parses a label token. `Aliases` also accepts the plural spellings
    /// used by the distributed corpus files (`METHODS`, `RESULTS`, `CONCLUSIONS`).
    pub fn parse(token: &str, policy: LabelPolicy) -> Option<Label> {
        match token {
            "BACKGROUND" => Some(Label::Background),
            "OBJECTIVE" => Some(Label::Objective),
            "METHOD" => Some(Label::Method),
            "RESULT" => Some(Label::Result),
            "CONCLUSION" => Some(Label::Conclusion),
            _ if policy == LabelPolicy::Aliases => match token {
                "METHODS" => Some(Label::Method),
                "RESULTS" => Some(Label::Result),
                "CONCLUSIONS" => Some(Label::Conclusion),
                _ => None,
            },
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::parse(s, LabelPolicy::Aliases).ok_or_else(|| format!("unknown label `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Only the five singular label names.
    #[default]
    Strict,
    Aliases,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    /// 1-based position within the document.
    pub index: usize,
    pub label: Label,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<SentenceRecord>,
}

impl Document {
    /// Sentence `k` (1-based).
    pub fn sentence(&self, k: usize) -> Option<&SentenceRecord> {
        k.checked_sub(1).and_then(|i| self.sentences.get(i))
    }
}

/// Parses an RCT-format file.
pub fn parse_rct(path: &Path, policy: LabelPolicy) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_rct_str(&text, policy).map_err(|e| match e {
        CorpusError::Parse { line, kind, .. } => CorpusError::Parse {
            path: Some(path.to_path_buf()),
            line,
            kind,
        },
        other => other,
    })
}

pub fn parse_rct_str(text: &str, policy: LabelPolicy) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut current: Option<(Document, usize)> = None;
    let err = |line, kind| CorpusError::Parse {
        path: None,
        line,
        kind,
    };
    let close = |cur: Option<(Document, usize)>, docs: &mut Vec<Document>| match cur {
        Some((d, header_line)) if d.sentences.is_empty() => {
            Err(err(header_line, ParseErrorKind::EmptyDocument(d.doc_id)))
        }
        Some((d, _)) => {
            docs.push(d);
            Ok(())
        }
        None => Ok(()),
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(id) = line.strip_prefix("###") {
            close(current.take(), &mut docs)?;
            current = Some((
                Document {
                    doc_id: id.trim().to_string(),
                    sentences: Vec::new(),
                },
                line_no,
            ));
            continue;
        }
        if line.trim().is_empty() {
            close(current.take(), &mut docs)?;
            continue;
        }
        let Some((doc, _)) = current.as_mut() else {
            return Err(err(line_no, ParseErrorKind::SentenceBeforeHeader));
        };
        let Some((tag, sentence)) = line.split_once('\t') else {
            return Err(err(line_no, ParseErrorKind::MissingTab));
        };
        let label = Label::parse(tag.trim(), policy)
            .ok_or_else(|| err(line_no, ParseErrorKind::UnknownLabel(tag.trim().to_string())))?;
        doc.sentences.push(SentenceRecord {
            index: doc.sentences.len() + 1,
            label,
            text: sentence.trim().to_string(),
        });
    }
    close(current.take(), &mut docs)?;
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_DOCS: &str = "###1\nBACKGROUND\tA b.\nMETHOD\tC d e.\n\n###2\nOBJECTIVE\tF.\nRESULT\tG h.\nCONCLUSION\tI.\n\n";

    #[test]
    fn parses_two_documents() {
        let docs = parse_rct_str(TWO_DOCS, LabelPolicy::Strict).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].sentences.len(), 2);
        assert_eq!(docs[1].sentences.len(), 3);
        assert_eq!(docs[1].doc_id, "2");
        assert_eq!(docs[1].sentences[2].index, 3);
        assert_eq!(docs[1].sentence(2).unwrap().label, Label::Result);
        assert!(docs[0].sentence(0).is_none());
    }

    #[test]
    fn plural_label_rejected_with_line_number_in_strict_mode() {
        let text = "###123\nBACKGROUND\tfoo.\nMETHODS\tbar.\n";
        match parse_rct_str(text, LabelPolicy::Strict) {
            Err(CorpusError::Parse { line, kind, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(kind, ParseErrorKind::UnknownLabel("METHODS".into()));
            }
            other => panic!("{other:?}"),
        }
        let docs = parse_rct_str(text, LabelPolicy::Aliases).unwrap();
        assert_eq!(docs[0].sentences[1].label, Label::Method);
        assert!(parse_rct_str("###1\nFOO\tx\n", LabelPolicy::Aliases).is_err());
    }

    #[test]
    fn structural_errors() {
        let e = parse_rct_str("BACKGROUND\tx\n", LabelPolicy::Strict).unwrap_err();
        assert!(matches!(
            e,
            CorpusError::Parse {
                line: 1,
                kind: ParseErrorKind::SentenceBeforeHeader,
                ..
            }
        ));
        let e = parse_rct_str("###1\nBACKGROUND x\n", LabelPolicy::Strict).unwrap_err();
        assert!(matches!(
            e,
            CorpusError::Parse {
                line: 2,
                kind: ParseErrorKind::MissingTab,
                ..
            }
        ));
        let e = parse_rct_str("###1\n\n", LabelPolicy::Strict).unwrap_err();
        assert!(e.to_string().contains("no sentences"));
    }

    #[test]
    fn file_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.txt");
        fs::write(&p, "###1\nBAD\tx\n").unwrap();
        let msg = parse_rct(&p, LabelPolicy::Strict).unwrap_err().to_string();
        assert!(msg.contains("train.txt") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn label_ids_are_stable() {
        for (i, l) in Label::ALL.iter().enumerate() {
            assert_eq!(l.id(), i);
            assert_eq!(Label::from_id(i), Some(*l));
            assert_eq!(l.as_str().parse::<Label>().unwrap(), *l);
        }
        assert_eq!(serde_json::to_string(&Label::Method).unwrap(), "\"METHOD\"");
    }
}
