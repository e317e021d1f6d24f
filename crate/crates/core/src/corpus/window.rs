use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{EncodeStyle, Vocab, MASK, NUM_SPECIALS, PAD, SEQ_LEN};
use super::{CorpusError, Document, Label, Result};

/// Sentence offsets relative to the target position `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i32>", into = "Vec<i32>")]
pub struct WindowSpec {
    offsets: Vec<i32>,
}

impl WindowSpec {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(CorpusError::InvalidWindow("no offsets".into()));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::InvalidWindow(format!(
                "offsets {offsets:?} are not strictly increasing"
            )));
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    pub fn contains(&self, offset: i32) -> bool {
        self.offsets.contains(&offset)
    }

    /// True iff no offset is at or after the target.
    pub fn lookahead(&self) -> bool {
        self.offsets.iter().all(|&o| o < 0)
    }

    /// File-name friendly form, e.g. `m2_m1` or `m1_0_p1`.
    pub fn name(&self) -> String {
        self.offsets
            .iter()
            .map(|&o| match o {
                o if o < 0 => format!("m{}", -o),
                0 => "0".to_string(),
                o => format!("p{o}"),
            })
            .collect::<Vec<_>>()
            .join("_")
    }
}

impl TryFrom<Vec<i32>> for WindowSpec {
    type Error = CorpusError;

    fn try_from(v: Vec<i32>) -> Result<Self> {
        WindowSpec::new(v)
    }
}

impl From<WindowSpec> for Vec<i32> {
    fn from(w: WindowSpec) -> Self {
        w.offsets
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.offsets.iter().map(|o| o.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

impl FromStr for WindowSpec {
    type Err = CorpusError;

    /// Accepts `-2,-1`, `[-2,-1]` or the file-name form `m2_m1`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('[').trim_end_matches(']');
        let bad = || CorpusError::InvalidWindow(format!("cannot parse `{s}`"));
        let parse_one = |t: &str| -> Result<i32> {
            let t = t.trim().replace('\u{2212}', "-");
            if let Some(n) = t.strip_prefix('m') {
                n.parse::<i32>().map(|v| -v).map_err(|_| bad())
            } else if let Some(n) = t.strip_prefix('p') {
                n.parse::<i32>().map_err(|_| bad())
            } else {
                t.trim_start_matches('+').parse::<i32>().map_err(|_| bad())
            }
        };
        let sep = if s.contains(',') { ',' } else { '_' };
        let offsets = s.split(sep).map(parse_one).collect::<Result<Vec<_>>>()?;
        WindowSpec::new(offsets)
    }
}

/// How positions whose context falls outside the document are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    #[default]
    Skip,
    /// Missing sentences become empty (specials only).
    BosSentinel,
}

mod padded {
    use super::{PAD, SEQ_LEN};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ids: &[u32], s: S) -> Result<S::Ok, S::Error> {
        let end = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
        s.collect_seq(&ids[..end])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
        let mut ids = Vec::<u32>::deserialize(d)?;
        if ids.len() > SEQ_LEN {
            return Err(serde::de::Error::custom(format!(
                "{} ids exceed the sequence length",
                ids.len()
            )));
        }
        ids.resize(SEQ_LEN, PAD);
        Ok(ids)
    }
}

/// One context sentence, encoded for both model families.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub offset: i32,
    pub text: String,
    #[serde(with = "padded")]
    pub enc: Vec<u32>,
    #[serde(with = "padded")]
    pub dec: Vec<u32>,
}

impl Context {
    pub fn encode(vocab: &Vocab, offset: i32, text: &str) -> Self {
        Self {
            offset,
            text: text.to_string(),
            enc: vocab.encode(text, EncodeStyle::Encoder, SEQ_LEN),
            dec: vocab.encode(text, EncodeStyle::Decoder, SEQ_LEN),
        }
    }
}

/// The target sentence `s_k`, available to training objectives only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSentence {
    pub text: String,
    #[serde(with = "padded")]
    pub enc: Vec<u32>,
    #[serde(with = "padded")]
    pub dec: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LasiExample {
    pub doc_id: String,
    /// 1-based target position.
    pub k: usize,
    pub label: Label,
    pub contexts: Vec<Context>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSentence>,
}

impl LasiExample {
    pub fn context(&self, offset: i32) -> Option<&Context> {
        self.contexts.iter().find(|c| c.offset == offset)
    }

    pub fn without_target(&self) -> LasiExample {
        LasiExample {
            target: None,
            ..self.clone()
        }
    }
}

/// One example per target position whose window lies inside its document.
pub fn make_examples(
    docs: &[Document],
    window: &WindowSpec,
    vocab: &Vocab,
    boundary: BoundaryPolicy,
) -> Vec<LasiExample> {
    let mut out = Vec::new();
    for doc in docs {
        'positions: for s in &doc.sentences {
            let k = s.index;
            let mut contexts = Vec::with_capacity(window.offsets.len());
            for &o in &window.offsets {
                let j = k as i64 + o as i64;
                let text = match usize::try_from(j).ok().and_then(|j| doc.sentence(j)) {
                    Some(r) => r.text.as_str(),
                    None if boundary == BoundaryPolicy::BosSentinel => "",
                    None => continue 'positions,
                };
                contexts.push(Context::encode(vocab, o, text));
            }
            out.push(LasiExample {
                doc_id: doc.doc_id.clone(),
                k,
                label: s.label,
                contexts,
                target: Some(TargetSentence {
                    text: s.text.clone(),
                    enc: vocab.encode(&s.text, EncodeStyle::Encoder, SEQ_LEN),
                    dec: vocab.encode(&s.text, EncodeStyle::Decoder, SEQ_LEN),
                }),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    RemoveWords,
    AddNextWords,
}

/// Test-time noise on `s_{k-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub n: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    /// Row name, e.g. `-2 words` or `+1 word`.
    pub fn label(&self) -> String {
        let sign = match self.kind {
            PerturbKind::RemoveWords => '-',
            PerturbKind::AddNextWords => '+',
        };
        let noun = if self.n == 1 { "word" } else { "words" };
        format!("{sign}{} {noun}", self.n)
    }

    pub fn apply(&self, vocab: &Vocab, ex: &LasiExample, docs: &DocIndex) -> Result<LasiExample> {
        match self.kind {
            PerturbKind::RemoveWords => {
                let seed = perturbation_seed(self.seed, &ex.doc_id, ex.k, self.kind, self.n);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(perturb_remove(vocab, ex, self.n, &mut rng))
            }
            PerturbKind::AddNextWords => perturb_add_next(vocab, ex, self.n, docs),
        }
    }
}

/// Per-example seed derived from the run seed and the example identity.
pub fn perturbation_seed(seed: u64, doc_id: &str, k: usize, kind: PerturbKind, n: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    h.update([0]);
    h.update((k as u64).to_le_bytes());
    h.update([kind as u8, n as u8]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn replace_previous(vocab: &Vocab, ex: &LasiExample, text: String) -> LasiExample {
    let mut out = ex.clone();
    if let Some(c) = out.contexts.iter_mut().find(|c| c.offset == -1) {
        *c = Context::encode(vocab, -1, &text);
    }
    out
}

/// Removes `n` random whitespace words from `s_{k-1}`, keeping at least one.
pub fn perturb_remove<R: Rng + ?Sized>(
    vocab: &Vocab,
    ex: &LasiExample,
    n: usize,
    rng: &mut R,
) -> LasiExample {
    let Some(prev) = ex.context(-1) else {
        return ex.clone();
    };
    let words: Vec<&str> = prev.text.split_whitespace().collect();
    let drop = n.min(words.len().saturating_sub(1));
    if drop == 0 {
        return ex.clone();
    }
    let mut gone = vec![false; words.len()];
    for i in sample(rng, words.len(), drop) {
        gone[i] = true;
    }
    let kept: Vec<&str> = words
        .iter()
        .zip(&gone)
        .filter(|(_, &g)| !g)
        .map(|(w, _)| *w)
        .collect();
    replace_previous(vocab, ex, kept.join(" "))
}

/// Source documents by id.
#[derive(Clone, Debug, Default)]
pub struct DocIndex {
    docs: HashMap<String, Document>,
}

impl DocIndex {
    pub fn new(docs: &[Document]) -> Self {
        Self {
            docs: docs.iter().map(|d| (d.doc_id.clone(), d.clone())).collect(),
        }
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }
}

/// Appends the first `n` whitespace words of `s_k` to `s_{k-1}`.
pub fn perturb_add_next(
    vocab: &Vocab,
    ex: &LasiExample,
    n: usize,
    docs: &DocIndex,
) -> Result<LasiExample> {
    let Some(prev) = ex.context(-1) else {
        return Ok(ex.clone());
    };
    let next = docs
        .get(&ex.doc_id)
        .and_then(|d| d.sentence(ex.k))
        .ok_or_else(|| CorpusError::MissingDocument {
            doc_id: ex.doc_id.clone(),
            k: ex.k,
        })?;
    let mut words: Vec<&str> = prev.text.split_whitespace().collect();
    words.extend(next.text.split_whitespace().take(n));
    Ok(replace_previous(vocab, ex, words.join(" ")))
}

/// Replaces each non-special token by `[MASK]` with probability `rate`.
pub fn mask_tokens<R: Rng + ?Sized>(ids: &[u32], rate: f64, rng: &mut R) -> Vec<u32> {
    if rate <= 0.0 {
        return ids.to_vec();
    }
    ids.iter()
        .map(|&id| {
            if (id as usize) >= NUM_SPECIALS && rng.random_bool(rate) {
                MASK
            } else {
                id
            }
        })
        .collect()
}
