//! `.mmt` binary tensor format.
//!
//! Layout (little-endian):
//! - magic `MMT1`
//! - dtype code: u8 (0 = f32, 1 = f64)
//! - ndim: u8
//! - dims: ndim × u64
//! - values: product(dims) raw elements

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::validate_dims;
use crate::{DType, Element, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MMT1";

/// A decoded tensor whose dtype is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to `E`, rounding when narrowing f64 to f32.
    pub fn convert<E: Element>(&self) -> Tensor<E> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is stored as `E`.
    pub fn into_exact<E: Element>(self) -> Result<Tensor<E>> {
        if self.dtype() != E::DTYPE {
            return Err(TensorError::DTypeMismatch {
                expected: E::DTYPE,
                found: self.dtype(),
            });
        }
        Ok(self.convert())
    }
}

pub fn write<E: Element, W: Write>(t: &Tensor<E>, mut w: W) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn encode<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + E::DTYPE.size_of() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(E::DTYPE.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated {what}")),
        _ => TensorError::Io(e),
    })
}

fn read_values<E: Element, R: Read>(r: &mut R, dims: Vec<usize>, numel: usize) -> Result<Tensor<E>> {
    let size = E::DTYPE.size_of();
    let mut raw = vec![0u8; numel * size];
    read_exact(r, &mut raw, "tensor data")?;
    let data = raw.chunks_exact(size).map(E::read_le).collect();
    Tensor::new(dims, data)
}

/// Reads one tensor from a stream, leaving any following bytes unread.
pub fn read_from<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic bytes {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut head = [0u8; 2];
    read_exact(&mut r, &mut head, "header")?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[0])))?;
    let ndim = head[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(&mut r, &mut b, "dims")?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| TensorError::Format("dimension does not fit in usize".into()))?;
        dims.push(d);
    }
    let numel = validate_dims(&dims).map_err(|e| TensorError::Format(e.to_string()))?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_values(&mut r, dims, numel)?),
        DType::F64 => AnyTensor::F64(read_values(&mut r, dims, numel)?),
    })
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cursor = bytes;
    let t = read_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after tensor",
            cursor.len()
        )));
    }
    Ok(t)
}

pub fn save<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64_slice(vec![2, 1], &[1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"MMT1".to_vec();
        expected.extend([0u8, 2]);
        expected.extend(2u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::from_fn(vec![3], |i| i as f64);
        let mut bytes = encode(&t);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(TensorError::Format(_))));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(TensorError::Format(_))));
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(TensorError::Format(_))));
        let mut bytes = encode(&t);
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(TensorError::Format(_))));
    }

    #[test]
    fn exact_dtype_is_enforced() {
        let t = Tensor::<f64>::scalar(1.5);
        let any = decode(&encode(&t)).unwrap();
        assert!(matches!(
            any.clone().into_exact::<f32>(),
            Err(TensorError::DTypeMismatch { .. })
        ));
        assert_eq!(any.into_exact::<f64>().unwrap(), t);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(dims, |i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-7);
            let back = decode(&encode(&t)).unwrap().into_exact::<f32>().unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
