//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"FSCKPT\r\n"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen     {"meta": <caller JSON>, "tensors": [{"name", "shape"}...]}
//! data              f64 values of every tensor, in header order
//! ```

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSCKPT\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(meta: &serde_json::Value, params: &ParamSet) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + hbytes.len() + params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&hbytes);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(serde_json::Value, ParamSet)> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (magic mismatch)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("truncated header length"))?;
    let hlen = u64::from_le_bytes(b8) as usize;
    if r.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..hlen]).map_err(|e| bad(&e.to_string()))?;
    r = &r[hlen..];
    let mut params = ParamSet::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if r.len() < n * 8 {
            return Err(bad(&format!("truncated data for {}", entry.name)));
        }
        let data = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        r = &r[n * 8..];
        let t = Tensor::new(entry.shape, data).map_err(|e| bad(&e.to_string()))?;
        params.insert(entry.name, t);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.meta, params))
}

pub fn save(path: &Path, meta: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let bytes = encode(meta, params)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new([2, 2], vec![0.1, -1e-300, 3.5, 1.0 / 3.0]).unwrap());
        p.insert("b", Tensor::new([3], vec![1.0, 2.0, f64::MIN_POSITIVE]).unwrap());
        let meta = serde_json::json!({"kind": "test"});
        let bytes = encode(&meta, &p).unwrap();
        let (m2, p2) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(p2, p);
        assert_eq!(encode(&m2, &p2).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros([4]));
        let bytes = encode(&serde_json::Value::Null, &p).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, Path::new("x")).is_err());
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
