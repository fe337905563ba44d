//! Single-tensor binary format.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 5    | magic `ESEG1`                 |
//! | 5      | 1    | element code (0 f32, 1 f64)   |
//! | 6      | 1    | rank, always 4                |
//! | 7      | 2    | reserved, zero                |
//! | 9      | 16   | dims n, c, h, w as u32        |
//! | 25     | ...  | payload, row-major            |

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{ElemType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"ESEG1";
pub const HEADER_LEN: usize = 25;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.numel() * T::ELEM.size());
    out.extend_from_slice(MAGIC);
    out.push(T::ELEM.code());
    out.push(4);
    out.extend_from_slice(&[0, 0]);
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes one tensor from the start of `bytes`, returning it and the bytes consumed.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..5])
        )));
    }
    let elem =
        ElemType::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown element code {}", bytes[5])))?;
    if elem != T::ELEM {
        return Err(Error::Format(format!("file holds {elem:?}, requested {:?}", T::ELEM)));
    }
    if bytes[6] != 4 {
        return Err(Error::Format(format!("rank {} is not supported", bytes[6])));
    }
    if bytes[7] != 0 || bytes[8] != 0 {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 9 + 4 * i;
        *d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    }
    let payload = dims
        .iter()
        .try_fold(elem.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let end = HEADER_LEN
        .checked_add(payload)
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated payload: {} of {payload} bytes",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(elem.size())
        .map(T::read_le)
        .collect();
    let t = Tensor::new(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)?;
    Ok((t, end))
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn unit_tensor_layout() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 25 + 4);
        assert_eq!(&bytes[..7], b"ESEG1\x00\x04");
    }

    #[test]
    fn bad_inputs() {
        let t = Tensor::<f64>::full(Shape::new(1, 2, 2, 1), 1.5);
        let mut bytes = encode_tensor(&t).unwrap();
        assert!(matches!(decode_tensor::<f32>(&bytes), Err(Error::Format(_))));
        assert!(decode_tensor::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensor::<f64>(&bytes[..10]).is_err());
        bytes[0] = b'X';
        let err = decode_tensor::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut huge = encode_tensor(&t).unwrap();
        for i in 0..4 {
            huge[9 + 4 * i..13 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_tensor::<f64>(&huge).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |[n, c, h, w]| {
            (n * 60 + c * 20 + h * 5 + w) as f32 * 0.1
        });
        save_tensor(&path, &t).unwrap();
        assert_eq!(load_tensor::<f32>(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(vals in prop::collection::vec(any::<u32>(), 1..64)) {
            let n = vals.len();
            let t = Tensor::new(Shape::new(1, 1, 1, n), vals.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
            let (back, used) = decode_tensor::<f32>(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert_eq!(used, 25 + 4 * n);
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
