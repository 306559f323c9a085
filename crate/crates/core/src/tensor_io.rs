//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STSR" | u32 version = 1 | u32 rank | rank x u32 dims | u8 dtype | payload
//! ```
//!
//! dtype tags: 0 = f32, 1 = u16, 2 = f64. The payload is row-major.
//! Series files are f32, masks are u16 and model parameters are f64.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STSR";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U16(ArrayD<u16>),
    F64(ArrayD<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::U16(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::U16(_) => DTYPE_U16,
            TensorData::F64(_) => DTYPE_F64,
        }
    }

    pub fn into_f32(self) -> Option<ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Some(a),
            _ => None,
        }
    }

    pub fn into_u16(self) -> Option<ArrayD<u16>> {
        match self {
            TensorData::U16(a) => Some(a),
            _ => None,
        }
    }

    pub fn into_f64(self) -> Option<ArrayD<f64>> {
        match self {
            TensorData::F64(a) => Some(a),
            _ => None,
        }
    }
}

/// Serializes a tensor to bytes in the container layout.
pub fn encode_tensor(tensor: &TensorData) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() > MAX_RANK {
        return Err(Error::Contract(format!(
            "tensor rank {} exceeds the container limit of {MAX_RANK}",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Contract(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(tensor.dtype_tag());
    // `iter()` walks logical row-major order whatever the memory layout.
    match tensor {
        TensorData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorData::U16(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorData::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses a container from bytes. `origin` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<TensorData> {
    let fail = |reason: &str| Error::format(origin, reason);
    let mut cursor = Reader { bytes, pos: 0 };
    let magic = cursor.take(4).ok_or_else(|| fail("truncated header"))?;
    if magic != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = cursor.u32().ok_or_else(|| fail("truncated header"))?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let rank = cursor.u32().ok_or_else(|| fail("truncated header"))? as usize;
    if rank > MAX_RANK {
        return Err(fail(&format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cursor.u32().ok_or_else(|| fail("truncated header"))? as usize);
    }
    let dtype = *cursor.take(1).ok_or_else(|| fail("truncated header"))?.first().unwrap();
    let count: usize = dims.iter().product();
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U16 => 2,
        DTYPE_F64 => 8,
        other => return Err(fail(&format!("unknown dtype tag {other}"))),
    };
    let payload = &bytes[cursor.pos..];
    if payload.len() != count * width {
        return Err(fail(&format!(
            "payload holds {} bytes but dims {:?} require {}",
            payload.len(),
            dims,
            count * width
        )));
    }
    let shape = IxDyn(&dims);
    let tensor = match dtype {
        DTYPE_F32 => {
            let v = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F32(ArrayD::from_shape_vec(shape, v).map_err(|e| fail(&e.to_string()))?)
        }
        DTYPE_U16 => {
            let v = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::U16(ArrayD::from_shape_vec(shape, v).map_err(|e| fail(&e.to_string()))?)
        }
        _ => {
            let v = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F64(ArrayD::from_shape_vec(shape, v).map_err(|e| fail(&e.to_string()))?)
        }
    };
    Ok(tensor)
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensor: &TensorData) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
