//! PTNSR binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PTNSR\0"        6 bytes magic
//! version  u8      always 1
//! dtype    u8      0 = f32, 1 = f64
//! ndim     u8
//! dims     ndim × u64
//! payload  row-major values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 6] = b"PTNSR\0";
pub const VERSION: u8 = 1;

pub fn encode<F: Scalar>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * t.rank() + F::BYTES * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(F::DTYPE);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decode a tensor, converting the stored dtype to `F` if they differ.
pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Tensor<F>> {
    if bytes.len() < 9 || &bytes[..6] != MAGIC {
        return Err(Error::format("not a PTNSR file (bad magic)"));
    }
    if bytes[6] != VERSION {
        return Err(Error::format(format!("unsupported PTNSR version {}", bytes[6])));
    }
    let dtype = bytes[7];
    let ndim = bytes[8] as usize;
    let header = 9 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::format("truncated PTNSR header"));
    }
    let dims: Vec<usize> =
        bytes[9..header].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize).collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("PTNSR dims overflow"))?;
    let payload = &bytes[header..];
    let data: Vec<F> = match dtype {
        0 => read_payload::<f32>(payload, n)?.into_iter().map(|v| F::lit(v as f64)).collect(),
        1 => read_payload::<f64>(payload, n)?.into_iter().map(F::lit).collect(),
        d => return Err(Error::format(format!("unknown PTNSR dtype {d}"))),
    };
    Tensor::new(dims, data).map_err(|e| Error::format(e.to_string()))
}

fn read_payload<G: Scalar>(payload: &[u8], n: usize) -> Result<Vec<G>> {
    if payload.len() != n * G::BYTES {
        return Err(Error::format(format!("PTNSR payload has {} bytes, expected {}", payload.len(), n * G::BYTES)));
    }
    Ok(payload.chunks_exact(G::BYTES).map(G::read_le).collect())
}

pub fn write<F: Scalar>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..6], b"PTNSR\0");
        assert_eq!(bytes[6..9], [1, 0, 2]);
        assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let mut bytes = encode(&Tensor::<f64>::zeros(&[3]));
        bytes[0] = b'X';
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode::<f64>(&[]), Err(Error::Format(_))));
        let good = encode(&Tensor::<f64>::zeros(&[3]));
        assert!(matches!(decode::<f64>(&good[..good.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn f32_file_reads_into_f64() {
        let t = Tensor::new(vec![3], vec![0.5f32, 1.25, -3.0]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t)).unwrap();
        assert_eq!(back.data(), &[0.5, 1.25, -3.0]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::<f64>::from_fn(&dims, |i| ((i as u64 ^ seed) as f64).sin() * 1e3);
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
