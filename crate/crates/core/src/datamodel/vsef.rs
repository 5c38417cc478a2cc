//! VSEF tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VSEF" | version: u8 = 1 | rank: u32 | dims: rank x u32 | values: f32 row-major
//! ```

use std::fs;
use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSEF";
pub const VERSION: u8 = 1;

/// Total file size for a tensor of the given dims.
pub fn encoded_len(dims: &[usize]) -> usize {
    4 + 1 + 4 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(tensor.dims()));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("header truncated at byte {at}")))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 5 {
        return Err(Error::Length(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported VSEF version {}",
            bytes[4]
        )));
    }
    let rank = read_u32(bytes, 5)? as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensor".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, 9 + 4 * i)? as usize);
    }
    let expected = encoded_len(&dims);
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            "dims {dims:?} need {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let start = 9 + 4 * rank;
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor_file(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_arithmetic() {
        assert_eq!(encoded_len(&[7, 7, 32]), 4 + 1 + 4 + 12 + 6272);
        let t = Tensor::zeros(vec![7, 7, 32]).unwrap();
        assert_eq!(encode(&t).len(), 6293);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vsef");
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.1, 3e-7, 0.0, 1e10, -2.25])
            .unwrap()
            .quantized();
        write_tensor_file(&t, &p).unwrap();
        let back = read_tensor_file(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(std::fs::read(&p).unwrap(), encode(&back));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode(&Tensor::zeros(vec![2]).unwrap());
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(Error::Format(_))));
        let mut b = encode(&Tensor::zeros(vec![2]).unwrap());
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_padded_payloads() {
        let b = encode(&Tensor::zeros(vec![3, 2]).unwrap());
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Length(_))));
        assert!(matches!(decode(&b[..7]), Err(Error::Length(_))));
        let mut longer = b.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Length(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let n: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<f32>() * 200.0 - 100.0)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = encode(&t);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
