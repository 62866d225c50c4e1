//! Small domain newtypes shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{hash, PublicKey};
use crate::encoding::{Encode, Encoder};

/// Global logical time shared by both chains and the operator network.
pub type Tick = u64;

/// Token amount in smallest units.
pub type Amount = u64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChainId(pub u32);

impl ChainId {
    pub const SOURCE: ChainId = ChainId(1);
    pub const TARGET: ChainId = ChainId(2);
}

impl fmt::Debug for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ChainId::SOURCE => f.write_str("S"),
            ChainId::TARGET => f.write_str("T"),
            ChainId(n) => write!(f, "chain{n}"),
        }
    }
}

impl fmt::Display for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Opaque 20-byte account address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub fn of_key(pk: &PublicKey) -> Address {
        let mut enc = Encoder::new("address");
        enc.u64(pk.0);
        Address::from_digest_bytes(&enc.to_digest().0)
    }

    /// A deterministic address for a named simulation party.
    pub fn named(label: &str) -> Address {
        Address::from_digest_bytes(&hash(label.as_bytes()).0)
    }

    fn from_digest_bytes(bytes: &[u8; 32]) -> Address {
        let mut out = [0u8; 20];
        out.copy_from_slice(&bytes[..20]);
        Address(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", &self.to_hex()[..8])
    }
}

impl Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s)
            .ok()
            .and_then(|v| v.try_into().ok())
            .map(Address)
            .ok_or_else(|| serde::de::Error::custom("expected 40 hex chars"))
    }
}

impl Encode for Address {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
}
