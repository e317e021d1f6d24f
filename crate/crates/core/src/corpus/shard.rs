//! JSON-lines example shards.
//!
//! The first line of a shard is a [`ShardHeader`]; each further line is one
//! [`LasiExample`] with fields `doc_id`, `k`, `label`, `contexts` (each with
//! `offset`, `text`, `enc`, `dec`) and, for training splits, `target`. Token id
//! lists are stored without trailing padding and re-padded on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::window::{LasiExample, WindowSpec};
use super::{CorpusError, Document, Result};

pub const SHARD_FORMAT: &str = "lasi-shard-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub format: String,
    pub vocab_hash: String,
    pub window: WindowSpec,
    pub split: String,
    pub count: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_lines<T: Serialize>(path: &Path, head: Option<&ShardHeader>, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if let Some(h) = head {
        serde_json::to_writer(&mut w, h).expect("header serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    for item in items {
        serde_json::to_writer(&mut w, item).expect("record serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| CorpusError::Shard {
        path: path.to_path_buf(),
        line: line_no,
        reason: e.to_string(),
    })
}

pub fn write_shard(path: &Path, header: &ShardHeader, examples: &[LasiExample]) -> Result<()> {
    let header = ShardHeader {
        count: examples.len(),
        ..header.clone()
    };
    write_lines(path, Some(&header), examples)
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Vec<LasiExample>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(io_err(path))?
        .ok_or_else(|| CorpusError::Shard {
            path: path.to_path_buf(),
            line: 1,
            reason: "missing header".into(),
        })?;
    let header: ShardHeader = parse_line(path, 1, &first)?;
    if header.format != SHARD_FORMAT {
        return Err(CorpusError::Shard {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("unsupported format `{}`", header.format),
        });
    }
    let mut examples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_line(path, i + 2, &line)?);
    }
    if examples.len() != header.count {
        return Err(CorpusError::Shard {
            path: path.to_path_buf(),
            line: 1,
            reason: format!(
                "header announces {} records, found {}",
                header.count,
                examples.len()
            ),
        });
    }
    Ok((header, examples))
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    write_lines(path, None, docs)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            docs.push(parse_line(path, i + 1, &line)?);
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_examples, parse_rct_str, BoundaryPolicy, LabelPolicy, Vocab};

    #[test]
    fn shard_and_documents_round_trip() {
        let docs = parse_rct_str(
            "###a\nBACKGROUND\tone two\nMETHOD\tthree\n\n###b\nRESULT\tfour five six\nCONCLUSION\tseven\n",
            LabelPolicy::Strict,
        )
        .unwrap();
        let vocab = Vocab::build(&docs, 1, 100).unwrap();
        let window: WindowSpec = "-1".parse().unwrap();
        let ex = make_examples(&docs, &window, &vocab, BoundaryPolicy::Skip);
        let header = ShardHeader {
            format: SHARD_FORMAT.into(),
            vocab_hash: vocab.hash(),
            window,
            split: "train".into(),
            count: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("shard.jsonl");
        write_shard(&p, &header, &ex).unwrap();
        let (h, back) = read_shard(&p).unwrap();
        assert_eq!(h.count, 2);
        assert_eq!(back, ex);

        let d = dir.path().join("docs.jsonl");
        write_documents(&d, &docs).unwrap();
        assert_eq!(read_documents(&d).unwrap(), docs);
    }

    #[test]
    fn corrupt_records_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            format!(
                "{{\"format\":\"{SHARD_FORMAT}\",\"vocab_hash\":\"x\",\"window\":[-1],\"split\":\"t\",\"count\":1}}\nnot json\n"
            ),
        )
        .unwrap();
        match read_shard(&p) {
            Err(CorpusError::Shard { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
