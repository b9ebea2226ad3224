//! Flat binary record for parameter tensors.
//!
//! Layout, all integers and values little-endian:
//!
//! ```text
//! magic    8 bytes  "PFDCREC\0"
//! version  u32      1
//! count    u32      number of tensors
//! repeat count times:
//!   rows   u32
//!   cols   u32
//!   data   rows·cols f64, row-major
//! ```

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub const RECORD_MAGIC: &[u8; 8] = b"PFDCREC\0";
pub const RECORD_VERSION: u32 = 1;

pub fn encode_record<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a Tensor2>,
{
    let tensors: Vec<&Tensor2> = tensors.into_iter().collect();
    let mut out = Vec::with_capacity(16 + tensors.iter().map(|t| 8 + 8 * t.len()).sum::<usize>());
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Record(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<Vec<Tensor2>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != RECORD_MAGIC {
        return Err(Error::Record("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::Record(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Record("tensor size overflows".into()))?;
        let raw = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Record("tensor size overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Tensor2::from_vec(rows, cols, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Record(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor2::from_vec(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_record([&t]);
        assert_eq!(&bytes[..8], RECORD_MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor2::zeros(2, 2);
        let bytes = encode_record([&t]);
        assert!(decode_record(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_record(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_record(&extra).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode_record(&v2).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shapes in prop::collection::vec((1usize..5, 1usize..5), 0..4), seed in any::<u64>()) {
            let mut rng = crate::seed::rng_from(seed);
            let tensors: Vec<Tensor2> = shapes
                .iter()
                .map(|&(r, c)| Tensor2::gaussian(r, c, 3.0, &mut rng))
                .collect();
            let decoded = decode_record(&encode_record(&tensors)).unwrap();
            prop_assert_eq!(decoded, tensors);
        }
    }
}
