//! GRAFTSNAP1 snapshot files.
//!
//! Layout:
//!
//! ```text
//! b"GRAFTSNAP1"
//! u64 LE            header length in bytes
//! header            UTF-8 JSON: arch, epoch, worker_id, tag, layer manifest
//! payload           per layer in manifest order: weights then bias,
//!                   row-major little-endian f64
//! ```

use std::fs;
use std::path::Path;

use graft_core::model::{LayerKind, LayerWeights, ModelSnapshot};
use graft_core::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 10] = b"GRAFTSNAP1";

#[derive(Debug, Error, PartialEq)]
pub enum SnapshotError {
    #[error("bad magic: expected GRAFTSNAP1, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated {section}: need {needed} bytes, {available} available")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("shape mismatch in `{layer}`: {message}")]
    ShapeMismatch { layer: String, message: String },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(u64),
}

impl SnapshotError {
    pub fn category(&self) -> &'static str {
        match self {
            SnapshotError::BadMagic { .. } => "snapshot-magic",
            SnapshotError::Truncated { .. } => "snapshot-truncated",
            SnapshotError::Header(_) => "snapshot-header",
            SnapshotError::ShapeMismatch { .. } => "snapshot-shape",
            SnapshotError::TrailingBytes(_) => "snapshot-trailing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    weight_shape: Vec<usize>,
    bias_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: String,
    epoch: usize,
    worker_id: usize,
    tag: String,
    layers: Vec<LayerEntry>,
}

/// `conv1 16x1x3x3, conv2 32x16x3x3, fc 3x32`
pub fn arch_summary(model: &ModelSnapshot) -> String {
    model
        .layers
        .iter()
        .map(|l| {
            let dims: Vec<String> = l.weights.shape().iter().map(|d| d.to_string()).collect();
            format!("{} {}", l.name, dims.join("x"))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn encode(model: &ModelSnapshot) -> Vec<u8> {
    let header = Header {
        arch: arch_summary(model),
        epoch: model.epoch,
        worker_id: model.worker_id,
        tag: model.tag.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                kind: l.kind,
                weight_shape: l.weights.shape().to_vec(),
                bias_shape: l.bias.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + model.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for l in &model.layers {
        for v in l.weights.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: u64, section: &'static str) -> Result<&'a [u8], SnapshotError> {
    if (bytes.len() as u64) < n {
        return Err(SnapshotError::Truncated {
            section,
            needed: n,
            available: bytes.len() as u64,
        });
    }
    let (head, rest) = bytes.split_at(n as usize);
    *bytes = rest;
    Ok(head)
}

fn element_count(layer: &str, shape: &[usize]) -> Result<u64, SnapshotError> {
    let mismatch = |message: &str| SnapshotError::ShapeMismatch {
        layer: layer.to_string(),
        message: message.to_string(),
    };
    if shape.is_empty() || shape.contains(&0) {
        return Err(mismatch("shape must have positive dimensions"));
    }
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|n| *n <= u64::MAX / 8)
        .ok_or_else(|| mismatch("shape is too large"))
}

fn read_values(bytes: &mut &[u8], shape: &[usize], layer: &str) -> Result<Tensor, SnapshotError> {
    let n = element_count(layer, shape)?;
    let raw = take(bytes, n * 8, "payload")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| SnapshotError::ShapeMismatch {
        layer: layer.to_string(),
        message: e.to_string(),
    })
}

pub fn decode(mut bytes: &[u8]) -> Result<ModelSnapshot, SnapshotError> {
    let magic = take(&mut bytes, MAGIC.len() as u64, "magic").map_err(|e| match e {
        SnapshotError::Truncated { .. } if !MAGIC.starts_with(bytes) => SnapshotError::BadMagic {
            found: bytes.to_vec(),
        },
        other => other,
    })?;
    if magic != MAGIC {
        return Err(SnapshotError::BadMagic { found: magic.to_vec() });
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let header: Header =
        serde_json::from_slice(take(&mut bytes, len, "header")?).map_err(|e| SnapshotError::Header(e.to_string()))?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in &header.layers {
        let weights = read_values(&mut bytes, &entry.weight_shape, &entry.name)?;
        let bias = read_values(&mut bytes, &entry.bias_shape, &entry.name)?;
        let layer =
            LayerWeights::new(entry.name.clone(), entry.kind, weights, bias).map_err(|e| SnapshotError::ShapeMismatch {
                layer: entry.name.clone(),
                message: e.to_string(),
            })?;
        layers.push(layer);
    }
    if !bytes.is_empty() {
        return Err(SnapshotError::TrailingBytes(bytes.len() as u64));
    }
    let mut model = ModelSnapshot::new(layers).map_err(|e| SnapshotError::ShapeMismatch {
        layer: "<model>".into(),
        message: e.to_string(),
    })?;
    if arch_summary(&model) != header.arch {
        return Err(SnapshotError::ShapeMismatch {
            layer: "<model>".into(),
            message: format!("header arch `{}` disagrees with the manifest", header.arch),
        });
    }
    model.epoch = header.epoch;
    model.worker_id = header.worker_id;
    model.tag = header.tag;
    Ok(model)
}

pub fn write_snapshot(model: &ModelSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(Error::io(path))
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<ModelSnapshot> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|source| Error::Snapshot {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use graft_core::model::{build_model, ArchSpec};

    fn model() -> ModelSnapshot {
        let mut m = build_model(&ArchSpec::default(), 7).unwrap();
        m.epoch = 12;
        m.worker_id = 3;
        m.tag = "t".into();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back = decode(&encode(&m)).unwrap();
        assert!(back.weights_bit_eq(&m));
        assert_eq!(back, m);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode(&model());
        for cut in [3, 10, 15, 40, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(SnapshotError::Truncated { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_magic_and_trailing_bytes() {
        let mut bytes = encode(&model());
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(SnapshotError::TrailingBytes(1)));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(SnapshotError::BadMagic { .. })));
        assert!(matches!(decode(b"NOPE"), Err(SnapshotError::BadMagic { .. })));
    }

    #[test]
    fn manifest_shape_errors() {
        let m = model();
        let bytes = encode(&m);
        let len = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[18..18 + len]).unwrap();
        // Swap the bias shape of conv1 for one that disagrees with its weights.
        let bad = header.replacen("\"bias_shape\":[16]", "\"bias_shape\":[8]", 1);
        assert_ne!(bad, header);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(bad.len() as u64).to_le_bytes());
        out.extend_from_slice(bad.as_bytes());
        out.extend_from_slice(&bytes[18 + len..]);
        match decode(&out) {
            Err(SnapshotError::ShapeMismatch { layer, .. }) => assert_eq!(layer, "conv1"),
            other => panic!("{other:?}"),
        }
    }
}
