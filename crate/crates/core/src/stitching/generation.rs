use std::collections::HashMap;
use std::sync::Mutex;

use crate::corpus::{CLS, EOS, SEP};
use crate::error::Result;
use crate::models::{content_len, generate, ModelSpec};
use crate::params::ParamSet;

/// Memoised greedy continuations of a frozen decoder, keyed by prefix.
#[derive(Debug, Default)]
pub struct GenerationCache {
    map: Mutex<HashMap<Vec<u32>, Vec<u32>>>,
}

impl GenerationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("generation cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New tokens (without `[EOS]`) continuing the decoder-style sentence
    /// `dec_ids` from just before its `[EOS]`.
    pub fn continuation(
        &self,
        spec: &ModelSpec,
        params: &ParamSet<f32>,
        dec_ids: &[u32],
        n_new: usize,
    ) -> Result<Vec<u32>> {
        let n = content_len(dec_ids);
        let prefix = if n > 0 && dec_ids[n - 1] == EOS {
            &dec_ids[..n - 1]
        } else {
            &dec_ids[..n]
        };
        if let Some(hit) = self.map.lock().expect("generation cache poisoned").get(prefix) {
            return Ok(hit.clone());
        }
        let full = generate(spec, params, prefix, n_new)?;
        let new: Vec<u32> = full[prefix.len()..]
            .iter()
            .copied()
            .filter(|&t| t != EOS)
            .collect();
        self.map
            .lock()
            .expect("generation cache poisoned")
            .insert(prefix.to_vec(), new.clone());
        Ok(new)
    }
}

/// `[CLS] a [SEP] b [SEP]` from an encoder-style sentence `a` and raw ids
/// `b`, cut from the right (continuation first) to at most `max_len`.
pub fn pair_sequence(enc_ids: &[u32], continuation: &[u32], max_len: usize) -> Vec<u32> {
    let n = content_len(enc_ids);
    let a: &[u32] = if n >= 2 { &enc_ids[1..n - 1] } else { &[] };
    let budget = max_len.saturating_sub(3);
    let a_keep = a.len().min(budget);
    let b_keep = continuation.len().min(budget - a_keep);
    let mut out = Vec::with_capacity(a_keep + b_keep + 3);
    out.push(CLS);
    out.extend_from_slice(&a[..a_keep]);
    out.push(SEP);
    out.extend_from_slice(&continuation[..b_keep]);
    out.push(SEP);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{frame, EncodeStyle, PAD};

    #[test]
    fn pair_layout_and_truncation() {
        let a = frame(&[10, 11], EncodeStyle::Encoder, 8);
        assert_eq!(pair_sequence(&a, &[20, 21], 100), vec![CLS, 10, 11, SEP, 20, 21, SEP]);
        let long_a: Vec<u32> = (0..120).map(|i| 10 + i).collect();
        let a = frame(&long_a, EncodeStyle::Encoder, 100);
        let b: Vec<u32> = vec![7; 50];
        let p = pair_sequence(&a, &b, 100);
        assert_eq!(p.len(), 100);
        assert_eq!((p[0], p[98], p[99]), (CLS, SEP, SEP));
        assert!(!p.contains(&PAD));
        let short = frame(&[10; 60], EncodeStyle::Encoder, 100);
        let p = pair_sequence(&short, &b, 100);
        assert_eq!(p.len(), 100);
        assert_eq!(p.iter().filter(|&&t| t == 7).count(), 37);
    }
}
