//! Canonical message encoding.
//!
//! Every field is written as a little-endian `u32` length followed by its
//! bytes, in declaration order. A leading domain tag keeps digests of
//! different message kinds apart.

use crate::crypto::{hash, Digest};

#[derive(Debug, Clone, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(tag: &str) -> Self {
        let mut enc = Encoder { buf: Vec::with_capacity(64) };
        enc.bytes(tag.as_bytes());
        enc
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        let len = u32::try_from(data.len()).expect("field longer than u32::MAX");
        self.buf.extend_from_slice(&len.to_le_bytes());
        self.buf.extend_from_slice(data);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(&d.0)
    }

    /// Writes a nested value as a single length-prefixed field.
    pub fn nested<E: Encode + ?Sized>(&mut self, value: &E) -> &mut Self {
        let mut inner = Encoder::default();
        value.encode_into(&mut inner);
        self.bytes(&inner.buf)
    }

    /// Writes a list as its element count followed by each element.
    pub fn list<E: Encode>(&mut self, items: &[E]) -> &mut Self {
        self.u64(items.len() as u64);
        for item in items {
            self.nested(item);
        }
        self
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn to_digest(&self) -> Digest {
        hash(&self.buf)
    }
}

pub trait Encode {
    fn encode_into(&self, enc: &mut Encoder);

    fn encoded(&self) -> Vec<u8> {
        let mut enc = Encoder::default();
        self.encode_into(&mut enc);
        enc.finish()
    }

    fn digest(&self) -> Digest {
        hash(&self.encoded())
    }
}

impl Encode for Digest {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(self);
    }
}

impl Encode for u64 {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(*self);
    }
}
