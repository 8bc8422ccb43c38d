//! FXCK checkpoints: `FXCK`, u32 version (1), u32 tensor count, then per
//! tensor u32 name length, UTF-8 name, u32 rank, u32 dims, f32 data.
//! Little-endian throughout.

use std::collections::HashSet;
use std::path::Path;

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One entry of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    binio::put_u32(&mut out, CHECKPOINT_VERSION);
    binio::put_u32(&mut out, binio::len_u32(tensors.len(), "tensor count")?);
    for t in tensors {
        if binio::checked_product(&t.shape, "tensor dims")? != t.data.len() {
            return Err(Error::ShapeMismatch {
                op: "encode_checkpoint",
                lhs: t.shape.clone(),
                rhs: vec![t.data.len()],
            });
        }
        binio::put_u32(&mut out, binio::len_u32(t.name.len(), "name length")?);
        out.extend_from_slice(t.name.as_bytes());
        binio::put_u32(&mut out, binio::len_u32(t.shape.len(), "rank")?);
        for &d in &t.shape {
            binio::put_u32(&mut out, binio::len_u32(d, "dimension")?);
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("header")? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::invalid("checkpoint tensor name is not UTF-8"))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::invalid(format!("duplicate checkpoint tensor `{name}`")));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let n = binio::checked_product(&shape, "tensor dims")?;
        let nbytes = n.checked_mul(4).ok_or(Error::DimensionOverflow("tensor data"))?;
        let raw = r.take(nbytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::invalid(format!(
            "{} trailing bytes after checkpoint",
            r.remaining()
        )));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    binio::write_file(path, &encode_checkpoint(tensors)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_checkpoint(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "conv.weight".into(),
                shape: vec![2, 1, 3, 3],
                data: (0..18).map(|i| i as f32 * 0.25 - 1.0).collect(),
            },
            NamedTensor {
                name: "bn.running_var".into(),
                shape: vec![2],
                data: vec![1.0, f32::MIN_POSITIVE],
            },
        ]
    }

    #[test]
    fn round_trip() {
        let t = sample();
        let bytes = encode_checkpoint(&t).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), t);
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_checkpoint(&sample()[1..]).unwrap();
        let mut expect = b"FXCK".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&14u32.to_le_bytes());
        expect.extend_from_slice(b"bn.running_var");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&f32::MIN_POSITIVE.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(short),
            Err(Error::Truncated { section: "tensor data", .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(b"FX"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn absurd_dims_do_not_allocate() {
        let mut bytes = b"FXCK".to_vec();
        for v in [1u32, 1, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. } | Error::DimensionOverflow(_)));
    }
}
