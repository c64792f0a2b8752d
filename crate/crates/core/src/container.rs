//! Named-tensor container shared by checkpoints and world files.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "FFC1" | count | { name_len | name | rank | extents.. | f64 LE payload }*
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FFC1";

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining input at `unit` bytes each.
    fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let start = self.pos;
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            return Err(Error::Parse { offset: start, msg: format!("{what} {n} exceeds input") });
        }
        Ok(n as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic".into() });
    }
    let count = r.len("entry count", 1)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.len("name length", 1)?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Parse { offset: at, msg: "name is not UTF-8".into() })?
            .to_owned();
        let at = r.pos;
        let rank = r.len("rank", 8)?;
        if !(1..=2).contains(&rank) {
            return Err(Error::Parse { offset: at, msg: format!("unsupported rank {rank}") });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("extent")? as usize);
        }
        let at = r.pos;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len() - at))
            .ok_or_else(|| Error::Parse { offset: at, msg: format!("payload for {name} exceeds input") })?;
        let bytes = r.take(n * 8, "payload")?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Parse { offset: at, msg: e.to_string() })?;
        entries.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last entry"));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_input_reports_offset() {
        let bytes = encode(&[("a".into(), Tensor::vector(vec![1.0, 2.0]))]);
        for cut in [0, 3, 4, 10, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        assert!(decode(b"XXXX").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            rows in 1usize..4,
            cols in 1usize..5,
            bits in proptest::collection::vec(any::<u64>(), 20),
        ) {
            let data: Vec<f64> = bits.iter().cycle().take(rows * cols).map(|&b| f64::from_bits(b)).collect();
            let entries = vec![
                ("m".to_string(), Tensor::matrix(rows, cols, data).unwrap()),
                ("v".to_string(), Tensor::vector(vec![0.5; cols])),
            ];
            let bytes = encode(&entries);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert!(back.iter().zip(&entries).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1)));
        }
    }
}
