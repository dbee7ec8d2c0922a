//! Binary tensor container.
//!
//! Layout: magic `GPT1`, one dtype byte (0 = f32, 1 = f64), one byte for the
//! number of dimensions, that many little-endian `u64` extents, then the raw
//! little-endian values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"GPT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dimensions do not fit the header", t.ndim())));
    }
    let mut out = Vec::with_capacity(6 + 8 * t.ndim() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

struct Header {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

fn header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing GPT1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let mut offset = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let chunk = bytes
            .get(offset..offset + 8)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        offset += 8;
    }
    let n: usize = shape.iter().product();
    if bytes.len() != offset + n * dtype.size() {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - offset,
            shape,
            n * dtype.size()
        )));
    }
    Ok(Header { dtype, shape, offset })
}

/// Decodes a container, converting values to `T` when the stored dtype differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = header(bytes)?;
    let payload = &bytes[h.offset..];
    let data: Vec<T> = match h.dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(&h.shape, data)
}

/// Stored dtype of an encoded container.
pub fn dtype_of(bytes: &[u8]) -> Result<DType> {
    Ok(header(bytes)?.dtype)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
