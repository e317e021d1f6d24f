//! Checkpoints: a TOML manifest naming every parameter with its shape and
//! byte offset, next to a raw little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const FORMAT: &str = "lasi-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    format: String,
    payload: String,
    payload_sha256: String,
    meta: M,
    params: Vec<CheckpointEntry>,
}

/// Payload file belonging to a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint<M: Serialize>(
    manifest_path: &Path,
    params: &ParamSet<f32>,
    meta: &M,
) -> Result<()> {
    let mut payload = Vec::with_capacity(params.num_values() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            count: t.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = payload_path(manifest_path);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        payload: bin
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| fail(manifest_path, "manifest path has no file name"))?
            .to_string(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta,
        params: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| fail(manifest_path, e.to_string()))?;
    fs::write(&bin, &payload)?;
    fs::write(manifest_path, text)?;
    Ok(())
}

pub fn load_checkpoint<M: DeserializeOwned>(manifest_path: &Path) -> Result<(ParamSet<f32>, M)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| fail(manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest<M> =
        toml::from_str(&text).map_err(|e| fail(manifest_path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(fail(
            manifest_path,
            format!("unsupported format `{}`", manifest.format),
        ));
    }
    let bin = manifest_path.with_file_name(&manifest.payload);
    let payload =
        fs::read(&bin).map_err(|e| fail(&bin, format!("cannot read payload: {e}")))?;
    if hex::encode(Sha256::digest(&payload)) != manifest.payload_sha256 {
        return Err(fail(&bin, "payload checksum mismatch"));
    }
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let expected: usize = e.shape.iter().product();
        let end = e.offset + 4 * e.count;
        if expected != e.count || end > payload.len() {
            return Err(fail(manifest_path, format!("entry `{}` is inconsistent", e.name)));
        }
        let data: Vec<f32> = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| fail(manifest_path, format!("entry `{}`: {err}", e.name)))?;
        params.insert(e.name.clone(), t);
    }
    Ok((params, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, ModelSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ModelSpec::new(ModelKind::Decoder, 40);
        let p = spec.init::<f32>(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gpt.toml");
        save_checkpoint(&path, &p, &spec).unwrap();
        let (q, back): (ParamSet<f32>, ModelSpec) = load_checkpoint(&path).unwrap();
        assert_eq!(back, spec);
        assert_eq!(q.len(), p.len());
        for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let first = fs::read(&path).unwrap();
        save_checkpoint(&path, &q, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let spec = ModelSpec::new(ModelKind::Encoder, 20);
        let p = spec.init::<f32>(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        save_checkpoint(&path, &p, &spec).unwrap();
        let bin = payload_path(&path);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint::<ModelSpec>(&path).is_err());
    }
}
