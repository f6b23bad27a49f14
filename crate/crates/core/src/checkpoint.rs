//! Flat binary parameter container.
//!
//! Layout (little-endian): magic `ZSQ1`, `u32` version, then records until end of
//! input: `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and the raw
//! `f64` values.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ZSQ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
        for &d in r.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Decode(alloc::format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Decode(alloc::format!(
            "unsupported version {version}"
        )));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let nlen = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Decode("name is not UTF-8".into()))?
            .into();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Decode("shape overflow".into()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Decode("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Decode(alloc::format!("{e}")))?;
        records.push(Record { name, tensor });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[Record {
            name: "w".into(),
            tensor: Tensor::vector(&[1.5]),
        }]);
        assert_eq!(&bytes[..4], b"ZSQ1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&[Record {
            name: "a".into(),
            tensor: Tensor::vector(&[1.0, 2.0]),
        }]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert_eq!(decode(&encode(&[])).unwrap(), vec![]);
    }

    proptest! {
        #[test]
        fn roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 1..30), name in "[a-z.0-9]{1,12}") {
            let n = vals.len();
            let recs = vec![
                Record { name: name.clone(), tensor: Tensor::vector(&vals) },
                Record { name: "m".into(), tensor: Tensor::new(vec![1, n], vals.clone()).unwrap() },
            ];
            prop_assert_eq!(decode(&encode(&recs)).unwrap(), recs);
        }
    }
}
