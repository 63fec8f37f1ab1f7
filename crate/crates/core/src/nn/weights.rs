//! Binary weight files: magic `FVW1`, format version, record count, then per
//! record a kind tag, its shape and the little-endian `f32` payload.

use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FVW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    ConvWeight = 1,
    ConvBias = 2,
    /// Rows: gamma, beta, running mean, running variance.
    BatchNorm = 3,
}

impl RecordKind {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Self::ConvWeight),
            2 => Some(Self::ConvBias),
            3 => Some(Self::BatchNorm),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new<T: Float>(kind: RecordKind, shape: Vec<usize>, data: &[T]) -> Self {
        Self {
            kind,
            shape,
            data: data.iter().map(|v| v.f64() as f32).collect(),
        }
    }

    pub fn from_tensor<T: Float>(kind: RecordKind, t: &Tensor<T>) -> Self {
        Self::new(kind, t.shape().to_vec(), t.data())
    }

    /// Pulls the next record and checks it has the expected kind and shape.
    pub fn take<T: Float>(it: &mut dyn Iterator<Item = Record>, kind: RecordKind, shape: &[usize]) -> Result<Vec<T>> {
        let r = it
            .next()
            .ok_or_else(|| Error::Invalid(format!("weights ended before a {kind:?} record")))?;
        if r.kind != kind || r.shape != shape {
            return Err(Error::Invalid(format!(
                "expected {kind:?} {shape:?}, weights hold {:?} {:?}",
                r.kind, r.shape
            )));
        }
        Ok(r.data.iter().map(|&v| T::c(v as f64)).collect())
    }
}

pub fn encode_weights(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.push(r.kind as u8);
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Invalid(format!("weights truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Invalid("not a FVW1 weights file".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    let version = u32_at(take(4)?);
    if version != FORMAT_VERSION {
        return Err(Error::Invalid(format!("unsupported weights version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let tag = take(1)?[0];
        let kind = RecordKind::from_tag(tag).ok_or_else(|| Error::Invalid(format!("unknown record tag {tag}")))?;
        let dims = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(dims.min(8));
        for _ in 0..dims {
            shape.push(u32_at(take(4)?) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(4 * len)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record { kind, shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::Invalid(format!("{} trailing bytes after weights", bytes.len() - pos)));
    }
    Ok(records)
}

pub fn save_weights(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode_weights(records)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Vec<Record>> {
    decode_weights(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let recs = vec![
            Record {
                kind: RecordKind::ConvWeight,
                shape: vec![2, 1, 1, 1],
                data: vec![f32::MIN_POSITIVE, -0.0],
            },
            Record {
                kind: RecordKind::BatchNorm,
                shape: vec![4, 1],
                data: vec![1.0, 0.1, 1e-30, 3.5],
            },
        ];
        let bytes = encode_weights(&recs);
        assert_eq!(&bytes[..4], b"FVW1");
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(encode_weights(&back), bytes);
        assert!(back[0].data[1].is_sign_negative());
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
    }
}
