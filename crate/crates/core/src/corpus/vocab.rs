use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusError, Document, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const BOS: u32 = 5;
pub const EOS: u32 = 6;
pub const NUM_SPECIALS: usize = 7;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] =
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"];

/// Padded sequence length of every encoded sentence.
pub const SEQ_LEN: usize = 100;

/// Lowercased word tokens: maximal alphanumeric runs, and each other
/// non-space character on its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeStyle {
    /// `[CLS] w… [SEP]`
    Encoder,
    /// `[BOS] w… [EOS]`
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    hash: String,
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Words occurring at least `min_freq` times in `docs`, most frequent
    /// first with ties broken lexicographically, capped so the vocabulary
    /// including specials has at most `max_size` entries.
    pub fn build(docs: &[Document], min_freq: usize, max_size: usize) -> Result<Self> {
        if docs.iter().all(|d| d.sentences.is_empty()) {
            return Err(CorpusError::Empty);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in docs.iter().flat_map(|d| &d.sentences) {
            for w in tokenize(&s.text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_size.saturating_sub(NUM_SPECIALS));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Content ids of `text`, without specials.
    pub fn word_ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Framed and padded ids of exactly `len` entries.
    pub fn encode(&self, text: &str, style: EncodeStyle, len: usize) -> Vec<u32> {
        frame(&self.word_ids(text), style, len)
    }

    /// Words of the non-special ids, in order.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id as usize >= NUM_SPECIALS)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            hash: self.hash(),
            tokens: self.tokens.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("vocab serializes");
        fs::write(path, json).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| CorpusError::Shard {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        let specials_ok = file.tokens.len() >= NUM_SPECIALS
            && file.tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .all(|(a, b)| a == b);
        if !specials_ok {
            return Err(CorpusError::Shard {
                path: path.to_path_buf(),
                line: 0,
                reason: "reserved tokens missing or out of order".into(),
            });
        }
        let vocab = Self::from_tokens(file.tokens);
        if vocab.hash() != file.hash {
            return Err(CorpusError::VocabMismatch {
                expected: file.hash,
                found: vocab.hash(),
            });
        }
        Ok(vocab)
    }
}

/// Wraps content ids in the style's specials, truncating content to fit,
/// then pads to `len`.
pub fn frame(content: &[u32], style: EncodeStyle, len: usize) -> Vec<u32> {
    let (open, close) = match style {
        EncodeStyle::Encoder => (CLS, SEP),
        EncodeStyle::Decoder => (BOS, EOS),
    };
    let keep = content.len().min(len.saturating_sub(2));
    let mut ids = Vec::with_capacity(len);
    ids.push(open);
    ids.extend_from_slice(&content[..keep]);
    ids.push(close);
    ids.resize(len, PAD);
    ids
}

/// `text` framed for `style` and padded to [`SEQ_LEN`].
pub fn encode_sentence(vocab: &Vocab, text: &str, style: EncodeStyle) -> Vec<u32> {
    vocab.encode(text, style, SEQ_LEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_rct_str, LabelPolicy};
    use proptest::prelude::*;

    fn docs(text: &str) -> Vec<Document> {
        parse_rct_str(text, LabelPolicy::Strict).unwrap()
    }

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("We measured IL-6 (p<0.05)."),
            vec!["we", "measured", "il", "-", "6", "(", "p", "<", "0", ".", "05", ")", "."]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn min_freq_filters_rare_words() {
        let v = Vocab::build(&docs("###1\nRESULT\ta a b\n"), 2, 100).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.len(), NUM_SPECIALS + 1);
    }

    #[test]
    fn ordering_and_cap() {
        let v = Vocab::build(&docs("###1\nRESULT\tc b b a a a d d\n"), 1, NUM_SPECIALS + 3).unwrap();
        assert_eq!(v.token(7), Some("a"));
        assert_eq!(v.token(8), Some("b"));
        assert_eq!(v.token(9), Some("d"));
        assert_eq!(v.len(), NUM_SPECIALS + 3);
        assert!(Vocab::build(&[], 1, 10).is_err());
    }

    #[test]
    fn encoding_frames_and_pads() {
        let v = Vocab::build(&docs("###1\nRESULT\tx y\n"), 1, 100).unwrap();
        let e = encode_sentence(&v, "", EncodeStyle::Encoder);
        assert_eq!(e.len(), SEQ_LEN);
        assert_eq!(&e[..2], &[CLS, SEP]);
        assert!(e[2..].iter().all(|&i| i == PAD));
        let long = vec!["x"; 200].join(" ");
        let d = encode_sentence(&v, &long, EncodeStyle::Decoder);
        assert_eq!(d.len(), SEQ_LEN);
        assert_eq!((d[0], d[SEQ_LEN - 1]), (BOS, EOS));
        let e = encode_sentence(&v, &long, EncodeStyle::Encoder);
        assert_eq!(e[SEQ_LEN - 1], SEP);
    }

    #[test]
    fn save_load_round_trip() {
        let v = Vocab::build(&docs("###1\nRESULT\tx y y\n"), 1, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let w = Vocab::load(&p).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.hash(), w.hash());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_on_known_words(words in proptest::collection::vec("[a-z]{1,6}", 0..120)) {
            let text = words.join(" ");
            let corpus = format!("###1\nRESULT\t{text} filler\n");
            let v = Vocab::build(&docs(&corpus), 1, 100_000).unwrap();
            for style in [EncodeStyle::Encoder, EncodeStyle::Decoder] {
                let ids = encode_sentence(&v, &text, style);
                prop_assert_eq!(ids.len(), SEQ_LEN);
                let back = v.decode(&ids);
                let expect: Vec<String> = words.iter().take(SEQ_LEN - 2).cloned().collect();
                prop_assert_eq!(back, expect);
            }
        }

        #[test]
        fn encoded_length_is_constant(text in "\\PC{0,400}") {
            let v = Vocab::build(&docs("###1\nRESULT\ta\n"), 1, 100).unwrap();
            prop_assert_eq!(encode_sentence(&v, &text, EncodeStyle::Encoder).len(), SEQ_LEN);
            prop_assert_eq!(encode_sentence(&v, &text, EncodeStyle::Decoder).len(), SEQ_LEN);
        }
    }
}
