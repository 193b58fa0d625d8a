//! Self-describing binary checkpoints.
//!
//! Layout: the magic bytes `GCACKPT1`, a little-endian `u64` header length,
//! a JSON header (model spec plus name, shape and SHA-256 digest of every
//! tensor), then each tensor's values as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

const MAGIC: &[u8; 8] = b"GCACKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

fn digest(values: &[u8]) -> String {
    hex::encode(Sha256::digest(values))
}

/// Serializes a model's structure and parameter values.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, t) in model.store.iter() {
        let start = payload.len();
        for v in t.value.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: t.name.clone(),
            rows: t.value.rows(),
            cols: t.value.cols(),
            sha256: digest(&payload[start..]),
        });
    }
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("missing checkpoint signature".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(Error::CheckpointFormat(format!(
            "header claims {len} bytes, file has {}",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::CheckpointFormat(format!("unreadable header: {e}")))?;
    Ok((header, &body[len..]))
}

/// Copies checkpoint values into `model`, which must have exactly the same
/// tensors (by name and shape).
pub fn load_into(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let (header, payload) = parse(bytes)?;
    let mut offset = 0;
    let mut seen = vec![false; model.store.len()];
    for entry in &header.tensors {
        let n = entry.rows * entry.cols * 8;
        let id = model.store.find(&entry.name).ok_or_else(|| Error::Checkpoint {
            tensor: entry.name.clone(),
            msg: "not present in the configured model".into(),
        })?;
        let t = model.store.get_mut(id);
        if t.value.shape() != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                msg: format!(
                    "checkpoint shape {}x{}, model expects {}x{}",
                    entry.rows,
                    entry.cols,
                    t.value.rows(),
                    t.value.cols()
                ),
            });
        }
        let raw = payload.get(offset..offset + n).ok_or_else(|| Error::Checkpoint {
            tensor: entry.name.clone(),
            msg: "values are truncated".into(),
        })?;
        if digest(raw) != entry.sha256 {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                msg: "values do not match their recorded digest".into(),
            });
        }
        for (dst, chunk) in t.value.as_mut_slice().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("eight bytes"));
        }
        seen[id.0] = true;
        offset += n;
    }
    if offset != payload.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - offset
        )));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.store.iter().nth(i).map(|(_, t)| t.name.clone()).unwrap_or_default();
        return Err(Error::Checkpoint {
            tensor: name,
            msg: "missing from the checkpoint".into(),
        });
    }
    Ok(())
}

/// Rebuilds the model described by a checkpoint and loads its values.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, _) = parse(bytes)?;
    let mut model = Model::new(header.spec)?;
    load_into(&mut model, bytes)?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint into a model built from `spec`, rejecting any
/// tensor whose name or shape disagrees with it.
pub fn load_checkpoint_for(path: &Path, spec: ModelSpec) -> Result<Model> {
    let mut model = Model::new(spec)?;
    load_into(&mut model, &std::fs::read(path)?)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gca::{AttentionConfig, ModelDims};
    use crate::model::{jitter_params, StreamSelection, Variant};
    use crate::numerics::{InitScheme, RngStream};

    fn spec(hidden: usize) -> ModelSpec {
        ModelSpec {
            variant: Variant::TwoStream,
            dims: ModelDims {
                joints: 5,
                frames: 3,
                input_dim: 3,
                hidden,
                classes: 3,
            },
            attention: AttentionConfig {
                score_hidden_dim: 4,
                ..AttentionConfig::default()
            },
            streams: StreamSelection::Both,
            partition: (0..5).map(|j| vec![j]).collect(),
            joint_order: vec![4, 3, 2, 1, 0],
            init: InitScheme::UniformScaled,
            seed: 1,
        }
    }

    fn model() -> Model {
        let mut m = Model::new(spec(4)).unwrap();
        jitter_params(&mut m.store, 1.0, &mut RngStream::new(2));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.spec, m.spec);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.as_slice().iter().zip(b.value.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &path).unwrap();
        match load_checkpoint_for(&path, spec(5)) {
            Err(Error::Checkpoint { tensor, msg }) => {
                assert_eq!(tensor, "first.w");
                assert!(msg.contains("shape"));
            }
            other => panic!("expected a tensor error, got {other:?}"),
        }
        let mut other = spec(4);
        other.variant = Variant::Gca;
        match load_checkpoint_for(&path, other) {
            Err(Error::Checkpoint { tensor, .. }) => assert!(tensor.starts_with("part.")),
            r => panic!("expected a tensor error, got {r:?}"),
        }
    }

    #[test]
    fn corruption_names_the_tensor() {
        let m = model();
        let mut bytes = to_bytes(&m).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        match from_bytes(&bytes) {
            Err(Error::Checkpoint { tensor, .. }) => assert_eq!(tensor, "part.classifier.b"),
            other => panic!("expected a tensor error, got {other:?}"),
        }
        assert!(matches!(from_bytes(&bytes[..n - 8]), Err(Error::Checkpoint { .. })));
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::CheckpointFormat(_))));
    }
}
