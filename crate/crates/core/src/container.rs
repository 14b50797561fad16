//! Flat binary container for real arrays (latents, waveforms, embeddings).
//!
//! Byte layout, all integers little-endian:
//!
//! | offset        | size      | content                                  |
//! |---------------|-----------|------------------------------------------|
//! | 0             | 12        | magic, ASCII `ROBIN-TENSOR`              |
//! | 12            | 4         | `u32` format version, currently `1`      |
//! | 16            | 4         | `u32` rank `r` (at least 1)              |
//! | 20            | 8·r       | `u64` extents, outermost first           |
//! | 20 + 8·r      | 8·N       | `f64` values, row-major, N = ∏ extents   |
//!
//! No padding, no trailing bytes.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 12] = b"ROBIN-TENSOR";
pub const VERSION: u32 = 1;

/// Shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Array> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!(
                "array shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    /// Number of leading-axis rows.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of one row once trailing axes are flattened.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }
}

pub fn encode(a: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * a.shape.len() + 8 * a.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
    for &d in &a.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &a.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Array> {
    let bad = |why: &str| Error::Data(format!("malformed container: {why}"));
    if bytes.len() < 20 || &bytes[..12] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let header = 20 + 8 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(bad("truncated shape"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[20 + 8 * i..28 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 8 * n {
        return Err(bad(&format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            8 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array::new(shape, data)
}

pub fn write(path: &Path, a: &Array) -> Result<()> {
    std::fs::write(path, encode(a)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let a = Array::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&a);
        assert_eq!(&b[..12], b"ROBIN-TENSOR");
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..20], &[2, 0, 0, 0]);
        assert_eq!(&b[20..28], &2u64.to_le_bytes());
        assert_eq!(&b[28..36], &1u64.to_le_bytes());
        assert_eq!(&b[36..44], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 52);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let b = encode(&Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode(&m).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut rng = crate::Rng::new(seed);
            let a = Array::new(shape, rng.normals(n)).unwrap();
            let back = decode(&encode(&a)).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
