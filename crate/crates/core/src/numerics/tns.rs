//! `TNS1` tensor container: `b"TNS1"`, u8 dtype, u8 rank, rank × u32 dims
//! (little endian), then the little-endian payload.

use crate::error::{Error, Result};

use super::{fp16, Tensor};

pub const MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F16 = 1,
    /// Lossless storage for double-precision verification runs.
    F64 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    /// Storage names used on the command line.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fp32" => Some(DType::F32),
            "fp16" | "fp16-store" => Some(DType::F16),
            "fp64" => Some(DType::F64),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "fp32",
            DType::F16 => "fp16",
            DType::F64 => "fp64",
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::F64 => 8,
        }
    }
}

/// Serializes `t`; returns the number of fp16-saturated elements alongside.
pub fn encode(t: &Tensor, dtype: DType) -> Result<(Vec<u8>, usize)> {
    if t.shape().len() > u8::MAX as usize {
        return Err(Error::invalid("tensor rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + dtype.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tensor dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let mut saturated = 0;
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F16 => {
                let (bits, sat) = fp16::encode(v);
                saturated += sat as usize;
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
    }
    Ok((out, saturated))
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        format: "TNS1",
        offset,
        reason: reason.into(),
    }
}

/// Parses one tensor from the front of `buf`; returns it with the bytes consumed.
/// `base` offsets reported positions when `buf` is a slice of a larger file.
pub fn decode_at(buf: &[u8], base: usize) -> Result<(Tensor, DType, usize)> {
    if buf.len() < 6 {
        return Err(corrupt(base + buf.len(), "truncated header"));
    }
    if &buf[..4] != MAGIC {
        return Err(corrupt(base, "bad magic"));
    }
    let dtype = DType::from_tag(buf[4]).ok_or_else(|| corrupt(base + 4, format!("unknown dtype tag {}", buf[4])))?;
    let rank = buf[5] as usize;
    let mut pos = 6;
    if buf.len() < pos + 4 * rank {
        return Err(corrupt(base + buf.len(), "truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
        shape.push(d as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let need = n
        .checked_mul(dtype.width())
        .ok_or_else(|| corrupt(base + 6, "dims overflow"))?;
    if buf.len() < pos + need {
        return Err(corrupt(
            base + buf.len(),
            format!("payload truncated: need {} bytes, have {}", need, buf.len() - pos),
        ));
    }
    let payload = &buf[pos..pos + need];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F16 => payload
            .chunks_exact(2)
            .map(|c| fp16::decode(u16::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype, pos + need))
}

pub fn decode(buf: &[u8]) -> Result<Tensor> {
    let (t, _, used) = decode_at(buf, 0)?;
    if used != buf.len() {
        return Err(corrupt(used, "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn write_file(path: &std::path::Path, t: &Tensor, dtype: DType) -> Result<()> {
    let (bytes, _) = encode(t, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
