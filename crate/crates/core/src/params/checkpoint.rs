//! Checkpoint file format.
//!
//! Layout: magic bytes `MGF1`, a u32 little-endian byte length, a UTF-8
//! JSON header `{version, tensors:[{name, shape, offset, len}], meta}`,
//! then the raw payload of 64-bit little-endian reals. Tensors are packed
//! in lexicographic name order, row-major, with byte offsets relative to
//! the payload start. `load(save(p))` is bit-identical to `p`.

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MGF1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorRecord>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<u64>,
    offset: u64,
    len: u64,
}

/// Serializes `p` to `path`. The write goes through a sibling temp file
/// and a rename, so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint(p: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(p);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let bytes = fs::read(path.as_ref())?;
    from_bytes(&bytes)
}

pub(crate) fn to_bytes(p: &ParamSet) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(p.num_layers());
    let mut payload = Vec::with_capacity(p.num_params() * 8);
    let mut offset = 0u64;
    for (name, tensor) in p.layers() {
        let len = (tensor.numel() * 8) as u64;
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: tensor.shape().iter().map(|d| *d as u64).collect(),
            offset,
            len,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let header = Header { version: VERSION, tensors, meta: p.meta().clone() };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization is infallible");

    let mut out = Vec::with_capacity(4 + 4 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 8 {
        return Err(Error::CorruptHeader("file shorter than magic and length prefix".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .ok_or_else(|| Error::CorruptHeader("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(Error::CorruptHeader(format!(
            "declared header length {header_len} exceeds file size"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    if header.version != VERSION {
        return Err(Error::UnknownVersion(header.version));
    }

    let payload = &bytes[header_end..];
    let mut expected_offset = 0u64;
    let mut prev_name: Option<&str> = None;
    let mut set = ParamSet::new();
    for rec in &header.tensors {
        if let Some(prev) = prev_name {
            if rec.name.as_str() <= prev {
                return Err(Error::BadTensorRecord {
                    layer: rec.name.clone(),
                    reason: "tensor names not in strict lexicographic order".into(),
                });
            }
        }
        prev_name = Some(&rec.name);

        let numel = rec
            .shape
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::BadTensorRecord {
                layer: rec.name.clone(),
                reason: "shape product overflows".into(),
            })?;
        if rec.len != numel * 8 {
            return Err(Error::BadTensorRecord {
                layer: rec.name.clone(),
                reason: format!("shape {:?} needs {} bytes, record says {}", rec.shape, numel * 8, rec.len),
            });
        }
        if rec.offset != expected_offset {
            return Err(Error::BadTensorRecord {
                layer: rec.name.clone(),
                reason: format!("offset {} breaks contiguous packing (expected {})", rec.offset, expected_offset),
            });
        }
        expected_offset += rec.len;
    }
    if payload.len() as u64 != expected_offset {
        return Err(Error::PayloadLength { expected: expected_offset, found: payload.len() as u64 });
    }

    for rec in &header.tensors {
        let start = rec.offset as usize;
        let end = start + rec.len as usize;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape: Vec<usize> = rec.shape.iter().map(|d| *d as usize).collect();
        let tensor = Tensor::new(shape, data).map_err(|_| Error::BadTensorRecord {
            layer: rec.name.clone(),
            reason: "shape/data mismatch after decode".into(),
        })?;
        set.insert(rec.name.clone(), tensor)?;
    }
    *set.meta_mut() = header.meta;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::from_entries([
            ("layer0.weight".to_string(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0, 4.0]).unwrap()),
            ("layer0.bias".to_string(), Tensor::new(vec![2], vec![0.25, -0.0]).unwrap()),
        ])
        .unwrap();
        p.set_meta("arch", "mlp-test");
        p
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let p = sample();
        let loaded = from_bytes(&to_bytes(&p)).unwrap();
        assert!(loaded.bits_eq(&p));
        assert_eq!(loaded.meta(), p.meta());
        assert_eq!(loaded.fingerprint(), p.fingerprint());
    }

    #[test]
    fn empty_set_round_trips() {
        let p = ParamSet::new();
        let loaded = from_bytes(&to_bytes(&p)).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = to_bytes(&sample());
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(from_bytes(cut), Err(Error::PayloadLength { .. })));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = to_bytes(&sample());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn unknown_version_rejected() {
        let p_bytes = to_bytes(&sample());
        let header_len = u32::from_le_bytes(p_bytes[4..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(p_bytes[8..8 + header_len].to_vec()).unwrap();
        let patched = header.replacen("\"version\":1", "\"version\":9", 1);
        let mut rebuilt = Vec::new();
        rebuilt.extend_from_slice(b"MGF1");
        rebuilt.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        rebuilt.extend_from_slice(patched.as_bytes());
        rebuilt.extend_from_slice(&p_bytes[8 + header_len..]);
        assert!(matches!(from_bytes(&rebuilt), Err(Error::UnknownVersion(9))));
    }

    #[test]
    fn garbage_header_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MGF1");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(b"{{{{");
        assert!(matches!(from_bytes(&bytes), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mgf");
        let p = sample();
        save_checkpoint(&p, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.bits_eq(&p));
    }
}
