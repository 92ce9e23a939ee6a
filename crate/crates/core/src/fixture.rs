//! `WCT4` tensor fixture files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "WCT4"
//! u32     version (1)
//! u64 x4  dims
//! f32 xN  row-major payload, N = d0·d1·d2·d3
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ConvError, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"WCT4";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 8;

pub fn encode(t: &Tensor4) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor4> {
    if bytes.len() < HEADER_LEN {
        return Err(ConvError::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(ConvError::Format(format!(
            "magic {:?} is not \"WCT4\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ConvError::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    let mut count: u64 = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 8 + 8 * i;
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if raw == 0 {
            return Err(ConvError::Format(format!("dim {i} is zero")));
        }
        count = count
            .checked_mul(raw)
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| ConvError::Format("dims overflow".into()))?;
        *d = usize::try_from(raw).map_err(|_| ConvError::Format("dims overflow".into()))?;
    }
    let payload = &bytes[HEADER_LEN..];
    let found = (payload.len() / 4) as u64;
    if found < count {
        return Err(ConvError::Truncated {
            expected: count,
            found,
        });
    }
    if payload.len() as u64 != count * 4 {
        return Err(ConvError::Format(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor4::from_vec(dims, data)
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor4> {
    decode(&fs::read(path)?)
}

pub fn tensor_write(t: &Tensor4, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dims: [u64; 4]) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&VERSION.to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&Tensor4::zeros([1, 1, 1, 1]).unwrap());
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(ConvError::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let mut b = header([2, 2, 2, 2]);
        for i in 0..15 {
            b.extend_from_slice(&(i as f32).to_le_bytes());
        }
        assert!(matches!(
            decode(&b),
            Err(ConvError::Truncated {
                expected: 16,
                found: 15
            })
        ));
    }

    #[test]
    fn overflowing_dims() {
        let b = header([u64::MAX, 2, 1, 1]);
        assert!(matches!(decode(&b), Err(ConvError::Format(_))));
        let b = header([1 << 31, 1 << 31, 1, 1]);
        assert!(matches!(decode(&b), Err(ConvError::Format(_))));
    }

    #[test]
    fn short_header_and_trailing_bytes() {
        assert!(decode(b"WCT4").is_err());
        let mut b = encode(&Tensor4::zeros([1, 1, 1, 2]).unwrap());
        b.push(0);
        assert!(matches!(decode(&b), Err(ConvError::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wct4");
        let t = Tensor4::random([2, 3, 4, 5], 11).unwrap();
        tensor_write(&t, &path).unwrap();
        let back = tensor_read(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"WCT4");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[40..], &1.0f32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in (1usize..4, 1usize..4, 1usize..5, 1usize..5),
            bits in proptest::collection::vec(
                prop_oneof![
                    any::<u32>(),
                    Just(f32::NAN.to_bits()),
                    Just(0x7fc0_1234),
                    Just(0.0f32.to_bits()),
                    Just((-0.0f32).to_bits()),
                    Just(f32::INFINITY.to_bits()),
                ],
                64,
            ),
        ) {
            let dims = [dims.0, dims.1, dims.2, dims.3];
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
            let t = Tensor4::from_vec(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.dims(), dims);
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
