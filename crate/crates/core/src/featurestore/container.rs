//! Binary tensor container.
//!
//! Layout (little-endian):
//!
//! | offset | size      | field                               |
//! |--------|-----------|-------------------------------------|
//! | 0      | 4         | magic `FTSR`                        |
//! | 4      | 1         | version (1)                         |
//! | 5      | 1         | dtype (1 = f32, 2 = u32, 3 = f64)   |
//! | 6      | 1         | rank (1 or 2)                       |
//! | 7      | 1         | padding (0)                         |
//! | 8      | 8 * rank  | extents as u64                      |
//! | ...    | ...       | row-major payload                   |
//!
//! Features and logits are rank-2 f32, labels are rank-1 u32. The f64 dtype
//! is only used inside model archives so fitted parameters reload exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, ParseError, Result};

pub const MAGIC: [u8; 4] = *b"FTSR";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U32 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U32),
            3 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// A rank-1 or rank-2 tensor with a validated shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1 or 2, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch("extents must be >= 1".into()));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} need {} values, payload has {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn from_matrix_f32(m: &Array2<f64>) -> Result<Self> {
        let values = m.iter().map(|&v| v as f32).collect();
        Self::new(vec![m.nrows(), m.ncols()], TensorData::F32(values))
    }

    pub fn from_matrix_f64(m: &Array2<f64>) -> Result<Self> {
        Self::new(vec![m.nrows(), m.ncols()], TensorData::F64(m.iter().copied().collect()))
    }

    pub fn from_vector_f32(v: &[f64]) -> Result<Self> {
        Self::new(vec![v.len()], TensorData::F32(v.iter().map(|&x| x as f32).collect()))
    }

    pub fn from_vector_f64(v: &[f64]) -> Result<Self> {
        Self::new(vec![v.len()], TensorData::F64(v.to_vec()))
    }

    pub fn from_labels(labels: &[u32]) -> Result<Self> {
        Self::new(vec![labels.len()], TensorData::U32(labels.to_vec()))
    }

    pub fn scalar_f64(x: f64) -> Self {
        Self {
            dims: vec![1],
            data: TensorData::F64(vec![x]),
        }
    }

    pub fn scalar_u32(x: u32) -> Self {
        Self {
            dims: vec![1],
            data: TensorData::U32(vec![x]),
        }
    }

    /// Floating payload promoted to f64. Errors for integer tensors.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::U32(_) => Err(Error::ShapeMismatch(
                "expected a floating tensor, found u32".into(),
            )),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected a rank-2 tensor, found rank {}",
                self.rank()
            )));
        }
        let values = self.to_f64_vec()?;
        Array2::from_shape_vec((self.dims[0], self.dims[1]), values)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a rank-1 tensor, found rank {}",
                self.rank()
            )));
        }
        Ok(Array1::from(self.to_f64_vec()?))
    }

    pub fn to_u32_vec(&self) -> Result<Vec<u32>> {
        match &self.data {
            TensorData::U32(v) => Ok(v.clone()),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a u32 tensor, found {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn scalar(&self) -> Result<f64> {
        let v = self.to_f64_vec()?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a scalar, found {} values",
                v.len()
            ))),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.rank() + self.data.len() * self.dtype().width()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.rank() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a complete container; trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ParseError> {
        let (tensor, used) = Self::parse_prefix(bytes, 0)?;
        if used != bytes.len() {
            return Err(ParseError::TrailingBytes {
                offset: used,
                count: bytes.len() - used,
            });
        }
        Ok(tensor)
    }

    /// Parses one container starting at `bytes[0]`, reporting offsets relative
    /// to `base`. Returns the tensor and the number of bytes consumed.
    pub(crate) fn parse_prefix(
        bytes: &[u8],
        base: usize,
    ) -> std::result::Result<(Self, usize), ParseError> {
        let need = |what, offset: usize, needed: usize| {
            if bytes.len() < offset + needed {
                Err(ParseError::Truncated {
                    what,
                    offset: base + offset,
                    needed,
                    available: bytes.len().saturating_sub(offset),
                })
            } else {
                Ok(())
            }
        };

        need("magic", 0, 4)?;
        if bytes[..4] != MAGIC {
            return Err(ParseError::BadMagic { offset: base });
        }
        need("header", 4, 4)?;
        let version = bytes[4];
        if version != VERSION {
            return Err(ParseError::UnsupportedVersion {
                offset: base + 4,
                version,
            });
        }
        let dtype = DType::from_code(bytes[5]).ok_or(ParseError::UnknownDtype {
            offset: base + 5,
            code: bytes[5],
        })?;
        let rank = bytes[6];
        if rank != 1 && rank != 2 {
            return Err(ParseError::BadRank {
                offset: base + 6,
                rank,
            });
        }
        if bytes[7] != 0 {
            return Err(ParseError::BadPadding {
                offset: base + 7,
                value: bytes[7],
            });
        }

        let mut cursor = HEADER_LEN;
        let mut dims = Vec::with_capacity(rank as usize);
        for axis in 0..rank as usize {
            need("extents", cursor, 8)?;
            let raw = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            if raw == 0 {
                return Err(ParseError::ZeroExtent {
                    offset: base + cursor,
                    axis,
                });
            }
            let extent = usize::try_from(raw).map_err(|_| ParseError::Truncated {
                what: "payload",
                offset: base + cursor,
                needed: usize::MAX,
                available: bytes.len().saturating_sub(cursor),
            })?;
            dims.push(extent);
            cursor += 8;
        }

        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width()));
        let payload_len = numel.ok_or(ParseError::Truncated {
            what: "payload",
            offset: base + cursor,
            needed: usize::MAX,
            available: bytes.len().saturating_sub(cursor),
        })?;
        need("payload", cursor, payload_len)?;
        let payload = &bytes[cursor..cursor + payload_len];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok((Self { dims, data }, cursor + payload_len))
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    TensorFile::from_bytes(&bytes).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

pub fn store_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
