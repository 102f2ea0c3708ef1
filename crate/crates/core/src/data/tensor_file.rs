//! `DVCT` tensor files: magic, u32 rank, u32 dims, row-major f32 payload.
//! All integers and floats are little-endian.

use std::path::Path;

use ndarray::Array2;

use crate::autograd::Mat;
use crate::error::{DvcError, Result};

pub const MAGIC: &[u8; 4] = b"DVCT";

/// Raw tensor contents as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn encode(raw: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + raw.dims.len() * 4 + raw.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(raw.dims.len() as u32).to_le_bytes());
    for d in &raw.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &raw.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let err = |reason: String| DvcError::TensorFormat { path: path.to_path_buf(), reason };
    if bytes.len() < 8 {
        return Err(err(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let rank = word(4) as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(err(format!("truncated header: rank {rank} needs {header} bytes")));
    }
    let dims: Vec<u32> = (0..rank).map(|i| word(8 + i * 4)).collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
    let count = count.ok_or_else(|| err("dimension product overflows".into()))?;
    let expected = count * 4;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(err(format!("truncated payload: dims {dims:?} require {expected} bytes, found {}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawTensor { dims, data })
}

pub fn write_raw(path: &Path, raw: &RawTensor) -> Result<()> {
    std::fs::write(path, encode(raw))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}

/// Write a matrix as a rank-2 tensor (values narrowed to f32).
pub fn write_tensor(path: &Path, m: &Mat) -> Result<()> {
    let raw = RawTensor { dims: vec![m.nrows() as u32, m.ncols() as u32], data: m.iter().map(|&v| v as f32).collect() };
    write_raw(path, &raw)
}

/// Read a tensor of rank ≤ 2 as a matrix. Rank 1 becomes a single row.
pub fn read_tensor(path: &Path) -> Result<Mat> {
    let raw = read_raw(path)?;
    let (r, c) = match raw.dims.as_slice() {
        [] => (1, 1),
        [n] => (1, *n as usize),
        [r, c] => (*r as usize, *c as usize),
        other => {
            return Err(DvcError::TensorFormat {
                path: path.to_path_buf(),
                reason: format!("expected rank ≤ 2, found rank {}", other.len()),
            })
        }
    };
    let data: Vec<f64> = raw.data.iter().map(|&v| v as f64).collect();
    Ok(Array2::from_shape_vec((r, c), data).expect("length checked by decode"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dvct");
        let m = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64 * 0.25 - 1.0);
        write_tensor(&path, &m).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), m);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&RawTensor { dims: vec![1], data: vec![1.0] });
        bytes[..4].copy_from_slice(b"XXXX");
        let e = decode(&bytes, Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("bad magic"), "{e}");
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        let e = decode(&bytes, Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("truncated payload"), "{e}");
        assert!(e.to_string().contains("16 bytes"), "{e}");
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode(&RawTensor { dims: vec![2, 1], data: vec![1.0, -2.5] });
        assert_eq!(&bytes[..4], b"DVCT");
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    proptest! {
        #[test]
        fn raw_round_trip_preserves_bits(dims in prop::collection::vec(0u32..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32))).collect();
            let raw = RawTensor { dims, data };
            let back = decode(&encode(&raw), Path::new("p")).unwrap();
            prop_assert_eq!(back.dims, raw.dims);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = raw.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
