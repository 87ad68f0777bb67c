//! `TNSR` binary tensor files.
//!
//! Layout (all little-endian):
//!
//! | offset | size        | field                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0      | 4           | magic `b"TNSR"`                         |
//! | 4      | 2           | version (`u16`, currently 1)            |
//! | 6      | 1           | dtype (0 = f32, 1 = u8, 2 = f64)        |
//! | 7      | 1           | rank (1..=3)                            |
//! | 8      | 4 * rank    | dims (`u32` each)                       |
//! | ...    | elem * prod | row-major payload                       |
//!
//! dtype 2 is only used by encoder checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic at byte 0: expected \"TNSR\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated tensor at byte {offset}: needed {needed} more bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("unsupported dtype code {code} at byte {offset}")]
    UnsupportedDtype { code: u8, offset: usize },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("unsupported rank {rank} at byte {offset}")]
    BadRank { rank: u8, offset: usize },
    #[error("{extra} trailing bytes after payload at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("payload of {len} elements does not match dims {dims:?}")]
    ShapeMismatch { dims: Vec<usize>, len: usize },
    #[error("dimension {0} does not fit in u32")]
    DimOverflow(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorError::BadRank { rank: dims.len() as u8, offset: 7 });
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch { dims, len: data.len() });
        }
        if let Some(&d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(TensorError::DimOverflow(d));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TensorError> {
        let take = |offset: usize, n: usize| -> Result<&[u8], TensorError> {
            buf.get(offset..offset + n).ok_or(TensorError::Truncated {
                offset,
                needed: n,
                available: buf.len().saturating_sub(offset),
            })
        };
        let magic = take(0, 4).map_err(|_| TensorError::BadMagic { found: buf[..buf.len().min(4)].to_vec() })?;
        if magic != MAGIC {
            return Err(TensorError::BadMagic { found: magic.to_vec() });
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion { version, offset: 4 });
        }
        let code = take(6, 1)?[0];
        let dtype = DType::from_code(code).ok_or(TensorError::UnsupportedDtype { code, offset: 6 })?;
        let rank = take(7, 1)?[0];
        if rank == 0 || rank as usize > MAX_RANK {
            return Err(TensorError::BadRank { rank, offset: 7 });
        }
        let dims: Vec<usize> = take(8, 4 * rank as usize)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let start = 8 + 4 * rank as usize;
        let count: usize = dims.iter().product();
        let payload = take(start, count * dtype.size())?;
        let end = start + payload.len();
        if end != buf.len() {
            return Err(TensorError::TrailingBytes { offset: end, extra: buf.len() - end });
        }
        let data = match dtype {
            DType::F32 => {
                TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::F64 => {
                TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
        };
        Ok(Self { dims, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| TensorError::Io { path: path.display().to_string(), source })?;
    Tensor::from_bytes(&buf)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorError> {
    let path = path.as_ref();
    let io = |source| TensorError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&tensor.to_bytes()).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_and_u8_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], TensorData::F32(vec![0.0; 6])).unwrap();
        let p = dir.path().join("z.tnsr");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);

        let t = Tensor::new(vec![1], TensorData::U8(vec![255])).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2], TensorData::U8(vec![7, 9])).unwrap();
        assert_eq!(t.to_bytes(), vec![b'T', b'N', b'S', b'R', 1, 0, 1, 1, 2, 0, 0, 0, 7, 9]);
    }

    #[test]
    fn errors_are_distinct_with_offsets() {
        let good = Tensor::new(vec![2, 2], TensorData::F32(vec![1.0; 4])).unwrap().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[6] = 9;
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::UnsupportedDtype { code: 9, offset: 6 })));

        let short = &good[..good.len() - 3];
        match Tensor::from_bytes(short) {
            Err(TensorError::Truncated { offset, needed, available }) => {
                assert_eq!((offset, needed, available), (16, 16, 13));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = good.clone();
        bad[7] = 4;
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::BadRank { rank: 4, offset: 7 })));

        let mut long = good;
        long.push(0);
        assert!(matches!(Tensor::from_bytes(&long), Err(TensorError::TrailingBytes { .. })));
    }

    #[test]
    fn constructor_checks_shape() {
        assert!(Tensor::new(vec![2, 2], TensorData::U8(vec![0; 3])).is_err());
        assert!(Tensor::new(vec![], TensorData::U8(vec![])).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], TensorData::U8(vec![0])).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..6, 1..=3).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
                prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64),
            ]
            .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(t in arb_tensor()) {
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.dims(), t.dims());
        }
    }
}
