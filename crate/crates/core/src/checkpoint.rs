//! Flat binary parameter files.
//!
//! Layout: a 5-byte magic, then for each tensor in registration order the
//! name length (`u32` LE), the UTF-8 name, the rank (`u32` LE), each
//! extent (`u64` LE) and the `f64` LE payload. There is no count field;
//! the file ends after the last tensor.

use std::path::Path;

use gues_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const GENERATOR_MAGIC: &[u8; 5] = b"GUES1";
pub const CLASSIFIER_MAGIC: &[u8; 5] = b"CLSF1";

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

pub fn encode(magic: &[u8; 5], store: &ParamStore) -> Vec<u8> {
    let mut out = magic.to_vec();
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Decodes every `(name, tensor)` entry, rejecting anything malformed.
pub fn decode(magic: &[u8; 5], bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(malformed(format!("missing magic {:?}", String::from_utf8_lossy(magic))));
    }
    let mut r = Reader {
        bytes,
        pos: magic.len(),
    };
    let mut entries = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u32("name length")?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(malformed(format!("name length {name_len} out of range")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| malformed("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(malformed(format!("rank {rank} of '{name}' exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("extent")?).map_err(|_| malformed("extent overflows"))?;
            count = count.checked_mul(d).ok_or_else(|| malformed("element count overflows"))?;
            shape.push(d);
        }
        let payload_len = count
            .checked_mul(8)
            .filter(|&n| n <= r.remaining())
            .ok_or_else(|| malformed(format!("payload of '{name}' ({count} values) exceeds the file")))?;
        let payload = r.take(payload_len, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

pub fn write(path: &Path, magic: &[u8; 5], store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(magic, store)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, magic: &[u8; 5]) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        s.register_buffer("stat", Tensor::scalar(-0.0));
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let bytes = encode(GENERATOR_MAGIC, &s);
        let back = decode(GENERATOR_MAGIC, &bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1.data(), s.get(s.find("w").unwrap()).data());
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert!(back[1].1.data()[0].is_sign_negative());
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let bytes = encode(GENERATOR_MAGIC, &store());
        assert!(decode(CLASSIFIER_MAGIC, &bytes).is_err());
        for cut in [6, 10, 20, bytes.len() - 1] {
            assert!(decode(GENERATOR_MAGIC, &bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn rejects_huge_extents_without_allocating() {
        let mut bytes = GENERATOR_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(GENERATOR_MAGIC, &bytes).is_err());
    }
}
