//! Tensor wire format: `TNSR` magic, version, rank, extents (u32 LE),
//! then the float32 LE payload.

use std::io::{Read, Write};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_f32_slice<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write one tensor. The payload is float32 regardless of the in-memory
/// scalar type; f64 tensors are narrowed.
pub fn write_tensor<F: Scalar, W: Write>(w: &mut W, t: &Tensor<F>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    write_u32(w, TENSOR_VERSION)?;
    write_u32(w, t.shape().len() as u32)?;
    for &e in t.shape() {
        write_u32(w, e as u32)?;
    }
    for v in t.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<F: Scalar, R: Read>(r: &mut R) -> Result<Tensor<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = read_f32_vec(r, numel)?;
    let data = raw.into_iter().map(|v| F::from_f64_c(v as f64)).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trips() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0.5, -1.25, 3.0, 4.5, -0.001, 9.75]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], TENSOR_MAGIC);
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        let err = read_tensor::<f32, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
