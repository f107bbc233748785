//! Golden tensor files.
//!
//! Layout: `b"SUPT"`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//! four little-endian `u32` extents `[B, C, H, W]`, then the scalars in
//! little-endian row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SUPT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 16;

/// A golden-file tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    }
    let shape = Shape(dims);
    let body = &bytes[HEADER_LEN..];
    let expected = shape.numel() * dtype.size();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape} needs {expected}",
            body.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_body(shape, body)?),
        DType::F64 => AnyTensor::F64(decode_body(shape, body)?),
    })
}

fn decode_body<T: Scalar>(shape: Shape, body: &[u8]) -> Result<Tensor<T>> {
    let data = body.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(mut r: impl Read) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_tensor(BufReader::new(File::open(path)?))
}
