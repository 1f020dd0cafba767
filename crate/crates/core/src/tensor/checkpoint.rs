//! Flat binary parameter files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing each
//! array's name, shape, dtype and byte offset into the data section, then the
//! little-endian float64 data of every array back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dtype, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
}

/// Serializes a store to bytes. Values are always written as float64.
pub fn to_bytes<S: Scalar>(store: &ParamStore<S>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: Dtype::F64,
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors: entries })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ParamStore<S>> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(fmt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[8..body])?;
    let data = &bytes[body..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        if e.dtype != Dtype::F64 {
            return Err(fmt(&format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(fmt(&format!("{}: data out of range", e.name)));
        }
        let vals = data[start..end]
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.insert(e.name, Tensor::new(&e.shape, vals)?);
    }
    Ok(store)
}

pub fn save<S: Scalar>(store: &ParamStore<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<S>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a.w", Tensor::from_f64(&[2, 2], &[1.0, -0.1, 1e-300, 3.5]).unwrap());
        s.insert("b", Tensor::from_f64(&[1], &[std::f64::consts::PI]).unwrap());
        let back: ParamStore<f64> = from_bytes(&to_bytes(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_lists_offsets() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::zeros(&[3]));
        s.insert("y", Tensor::zeros(&[2]));
        let b = to_bytes(&s).unwrap();
        let hlen = u64::from_le_bytes(b[..8].try_into().unwrap()) as usize;
        let h: Header = serde_json::from_slice(&b[8..8 + hlen]).unwrap();
        assert_eq!(h.tensors[1].offset, 24);
        assert_eq!(b.len(), 8 + hlen + 40);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::zeros(&[3]));
        let b = to_bytes(&s).unwrap();
        assert!(from_bytes::<f64>(&b[..b.len() - 1]).is_err());
        assert!(from_bytes::<f64>(&b[..4]).is_err());
    }
}
