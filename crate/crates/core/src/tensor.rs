//! Dense row-major `f64` tensors and the `EBT1` file format.
//!
//! Layout of a tensor file, all integers little-endian:
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 4                | magic `EBT1`                             |
//! | 1                | rank `r`, 1..=4                          |
//! | 4 * r            | extents as `u32`                         |
//! | 8 * prod(extents)| payload as IEEE-754 `f64`, row-major     |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EBT1";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "rank must be at least 1" });
    }
    if shape.len() > MAX_RANK {
        return Err(Error::RankTooLarge(shape.len()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "extents must be positive" });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = check_shape(&shape)?;
        Ok(Tensor { shape, data: vec![0.0; len] })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let len = check_shape(&shape)?;
        Ok(Tensor { shape, data: vec![value; len] })
    }

    /// One-dimensional tensor over `data`. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector tensor must not be empty");
        Tensor { shape: vec![data.len()], data }
    }

    /// Internal constructor for shapes that are already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {index:?} out of bounds for shape {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// Equality on the raw bit patterns, distinguishing `-0.0` and NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Sub-tensor along the leading axis, e.g. frame `t` of a `[T, C, H, W]` clip.
    pub fn slice_outer(&self, i: usize) -> Tensor {
        assert!(self.rank() >= 2, "slice_outer needs rank >= 2");
        assert!(i < self.shape[0], "outer index {i} out of bounds");
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or(Error::InvalidShape { shape: vec![0], reason: "cannot stack zero tensors" })?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        check_shape(&shape)?;
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// Serialize to the `EBT1` byte layout.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &e in &t.shape {
        let e = u32::try_from(e).expect("tensor extent exceeds u32");
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 5 {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(Error::TruncatedPayload { expected: 5, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let rank = bytes[4] as usize;
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge(rank));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::TruncatedPayload { expected: header, actual: bytes.len() });
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let len = check_shape(&shape)?;
    let expected = header + 8 * len;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_element_file_layout() {
        let t = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let bytes = encode_tensor(&t);
        // 4 magic + 1 rank + 4 extent + 2 * 8 payload
        assert_eq!(bytes.len(), 25);
        assert_eq!(&bytes[..4], b"EBT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..17], &0.0f64.to_le_bytes());
        assert_eq!(&bytes[17..25], &1.0f64.to_le_bytes());
    }

    #[test]
    fn zero_payload_is_zero_bytes() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[9..], &[0u8; 8]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ebt");
        let t = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), &[2]);
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_tensor(&Tensor::vector(vec![1.0]));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = encode_tensor(&Tensor::vector(vec![1.0; 8]));
        let cut = &bytes[..bytes.len() - 4 * 8];
        assert!(matches!(
            decode_tensor(cut),
            Err(Error::TruncatedPayload { expected: 73, actual: 41 })
        ));
    }

    #[test]
    fn rejects_rank_above_four() {
        let mut bytes = b"EBT1".to_vec();
        bytes.push(5);
        bytes.extend(std::iter::repeat_n(1u32.to_le_bytes(), 5).flatten());
        bytes.extend_from_slice(&0.0f64.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::RankTooLarge(5))));
    }

    #[test]
    fn rejects_trailing_bytes_and_zero_extent() {
        let mut bytes = encode_tensor(&Tensor::vector(vec![1.0]));
        bytes.push(0);
        assert!(matches!(decode_tensor(&bytes), Err(Error::TrailingBytes(1))));

        let mut bytes = b"EBT1".to_vec();
        bytes.push(1);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn constructor_checks() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(matches!(Tensor::zeros(vec![1; 5]), Err(Error::RankTooLarge(5))));
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(t.flat_index(&[i, j]), i * 4 + j);
                assert_eq!(t.get(&[i, j]), (i * 4 + j) as f64);
            }
        }
        let c = Tensor::new(vec![2, 3, 4, 5], (0..120).map(f64::from).collect()).unwrap();
        assert_eq!(c.get(&[1, 2, 3, 4]), 119.0);
        assert_eq!(c.slice_outer(1).get(&[0, 0, 0]), 60.0);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let len: usize = shape.iter().product();
            proptest::collection::vec(any::<f64>(), len)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise_identity(t in arb_tensor()) {
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
