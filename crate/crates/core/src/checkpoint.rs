//! Binary checkpoint format.
//!
//! ```text
//! "ISDA" | version: u8 = 1 | count: u64
//! repeated count times:
//!   name_len: u64 | name: UTF-8 | dtype: u8 (1 = f32, 2 = f64) | rank: u64
//!   dims: rank x u64 | data: numel x f32/f64
//! ```
//!
//! Every integer and float is little-endian. Tensors are written as f64;
//! f32 records are accepted on load and widened.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ISDA";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::MalformedCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::MalformedCheckpoint(format!("length {v} overflows")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!("unsupported version {version}")));
    }
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::MalformedCheckpoint(format!("tensor name: {e}")))?
            .to_owned();
        if store.find(&name).is_some() {
            return Err(Error::MalformedCheckpoint(format!("duplicate tensor {name}")));
        }
        let dtype = r.u8()?;
        let rank = r.len()?;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.len()?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("{name}: dims {dims:?} overflow")))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(numel.checked_mul(8).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r
                .take(numel.checked_mul(4).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::MalformedCheckpoint(format!("{name}: unknown dtype tag {other}"))),
        };
        store.add(name, Tensor::new(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint into an already-built parameter layout, failing with
/// [`Error::CheckpointMismatch`] unless names and shapes agree exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.assign_from(&load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25));
        s.add("b", Tensor::scalar(std::f64::consts::PI));
        s
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&sample_store());
        assert_eq!(&bytes[..4], b"ISDA");
        assert_eq!(bytes[4], 1);
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 8);
        assert_eq!(&bytes[21..29], b"a.weight");
        assert_eq!(bytes[29], 2);
        assert_eq!(u64::from_le_bytes(bytes[30..38].try_into().unwrap()), 2);
        // header + (len, name, dtype, rank, dims, data) per record
        assert_eq!(bytes.len(), 5 + 8 + (8 + 8 + 1 + 8 + 16 + 48) + (8 + 1 + 1 + 8 + 8));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = sample_store();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), encode(&s));
    }

    #[test]
    fn f32_records_are_widened() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ISDA");
        bytes.push(1);
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.push(b'w');
        bytes.push(1);
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        let s = decode(&bytes).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data(), &[1.5, -0.25]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&sample_store());
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode(&bad_version).is_err());
        let mut trailing = good;
        trailing.push(0);
        assert!(decode(&trailing).is_err());
    }
}
