//! Canonical binary encodings.
//!
//! Everything that is hashed, sealed, signed, or persisted goes through this
//! module so the byte layout is deterministic and documented in one place.
//!
//! Primitives (all lengths big-endian):
//! - `u8` / `u32` / `u64`: fixed-width integers
//! - `bytes`: `u32` length prefix followed by the raw bytes
//! - `str`: `bytes` of the UTF-8 encoding
//! - field map: `u32` entry count, then entries sorted ascending by name,
//!   each entry `str name` followed by `bytes value`
//!
//! A field map is the payload encoding shared by PAL envelopes, encrypted
//! credential payloads, and network frame bodies, so independent components
//! (client add-on, PAL, proxy) produce bit-identical bytes for equal content.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("trailing {0} undecoded bytes")]
    Trailing(usize),
    #[error("length field {0} exceeds remaining input")]
    BadLength(u64),
    #[error("field name is not valid UTF-8")]
    BadName,
    #[error("field map not in canonical order or has duplicate names")]
    NonCanonical,
    #[error("{0}")]
    Invalid(String),
}

/// Incremental writer for the canonical encoding.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Raw bytes with no length prefix; for fixed-width values like digests.
    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn field_map(&mut self, fields: &BTreeMap<String, Vec<u8>>) -> &mut Self {
        self.u32(fields.len() as u32);
        for (name, value) in fields {
            self.str(name);
            self.bytes(value);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor-based reader; every decode error carries the failing offset.
pub struct Reader<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { input, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated(self.pos));
        }
        let s = &self.input[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        self.take(n)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        if self.remaining() < len {
            return Err(WireError::BadLength(len as u64));
        }
        Ok(self.take(len)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?).map_err(|_| WireError::BadName)
    }

    pub fn field_map(&mut self) -> Result<BTreeMap<String, Vec<u8>>, WireError> {
        let count = self.u32()?;
        let mut map = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name = self.str()?;
            if let Some(p) = &prev {
                if *p >= name {
                    return Err(WireError::NonCanonical);
                }
            }
            let value = self.bytes()?;
            prev = Some(name.clone());
            map.insert(name, value);
        }
        Ok(map)
    }

    /// Fails unless the whole input was consumed; use for top-level decodes.
    pub fn finish(self) -> Result<(), WireError> {
        if self.remaining() != 0 {
            return Err(WireError::Trailing(self.remaining()));
        }
        Ok(())
    }
}

/// Encode a field map standalone (the shared payload encoding).
pub fn encode_field_map(fields: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut w = Writer::new();
    w.field_map(fields);
    w.finish()
}

/// Decode a standalone field map, requiring full consumption.
pub fn decode_field_map(input: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, WireError> {
    let mut r = Reader::new(input);
    let map = r.field_map()?;
    r.finish()?;
    Ok(map)
}

/// Convenience: build a field map from (name, value) pairs.
pub fn field_map<I, K, V>(pairs: I) -> BTreeMap<String, Vec<u8>>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<Vec<u8>>,
{
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let mut w = Writer::new();
        w.u8(7).u32(0xDEAD_BEEF).u64(42).bytes(b"hi").str("name");
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0xDEAD_BEEF);
        assert_eq!(r.u64().unwrap(), 42);
        assert_eq!(r.bytes().unwrap(), b"hi");
        assert_eq!(r.str().unwrap(), "name");
        r.finish().unwrap();
    }

    #[test]
    fn field_map_is_name_sorted() {
        let map = field_map([("zeta", b"1".to_vec()), ("alpha", b"2".to_vec())]);
        let enc = encode_field_map(&map);
        // alpha precedes zeta regardless of insertion order
        let alpha_pos = enc.windows(5).position(|w| w == b"alpha").unwrap();
        let zeta_pos = enc.windows(4).position(|w| w == b"zeta").unwrap();
        assert!(alpha_pos < zeta_pos);
        assert_eq!(decode_field_map(&enc).unwrap(), map);
    }

    #[test]
    fn rejects_out_of_order_fields() {
        // hand-build: count=2, "b" then "a"
        let mut w = Writer::new();
        w.u32(2).str("b").bytes(b"1").str("a").bytes(b"2");
        let buf = w.finish();
        assert_eq!(
            decode_field_map(&buf).unwrap_err(),
            WireError::NonCanonical
        );
    }

    #[test]
    fn rejects_duplicate_fields() {
        let mut w = Writer::new();
        w.u32(2).str("a").bytes(b"1").str("a").bytes(b"2");
        let buf = w.finish();
        assert_eq!(
            decode_field_map(&buf).unwrap_err(),
            WireError::NonCanonical
        );
    }

    #[test]
    fn truncation_is_detected() {
        let enc = encode_field_map(&field_map([("k", b"value".to_vec())]));
        for cut in 0..enc.len() {
            assert!(decode_field_map(&enc[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_bytes_are_detected() {
        let mut enc = encode_field_map(&field_map([("k", b"v".to_vec())]));
        enc.push(0);
        assert!(matches!(
            decode_field_map(&enc).unwrap_err(),
            WireError::Trailing(1)
        ));
    }

    #[test]
    fn length_overflow_is_detected() {
        let mut w = Writer::new();
        w.u32(u32::MAX); // claims 4 GiB of bytes
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert!(matches!(r.bytes().unwrap_err(), WireError::BadLength(_)));
    }
}
