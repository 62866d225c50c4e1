//! Deterministic cryptographic primitives shared by the whole simulator.
//!
//! Hashing is SHA-256. Signatures are Schnorr signatures over the
//! multiplicative group of the Mersenne prime field `2^61 - 1`. The group is
//! far too small to be secure; it is a fast, publicly verifiable stand-in so
//! that thousands of simulated committee and operator signatures can be
//! checked per run. Nonces are derived from the secret key and message, so
//! signing is deterministic.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;

use crate::encoding::{Encode, Encoder};

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }

    fn to_u64(self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    use sha2::Digest as _;
    Digest(Sha256::digest(data).into())
}

// Group arithmetic modulo the Mersenne prime 2^61 - 1.
const P: u64 = (1 << 61) - 1;
const EXP_MOD: u64 = P - 1;
const GENERATOR: u64 = 37;

fn mul_mod(a: u64, b: u64) -> u64 {
    let x = a as u128 * b as u128;
    let lo = (x as u64) & P;
    let hi = (x >> 61) as u64;
    let mut r = lo + hi;
    if r >= P {
        r -= P;
    }
    r
}

fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= P;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base);
        }
        base = mul_mod(base, base);
        exp >>= 1;
    }
    acc
}

fn exp_from_digest(d: Digest) -> u64 {
    d.to_u64() % EXP_MOD
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PublicKey(pub u64);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{:016x}", self.0)
    }
}

impl Encode for PublicKey {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.0);
    }
}

/// Signing key. Never printed and never serialized.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SecretKey(u64);

impl SecretKey {
    /// Canonical byte encoding, used by confinement checks that scan
    /// outbound traffic for leaked key material.
    pub fn canonical_bytes(&self) -> [u8; 8] {
        self.0.to_le_bytes()
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public_key: PublicKey,
    secret_key: SecretKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public_key", &self.public_key).finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Derives a key pair from seed material. Equal seeds give equal keys.
    pub fn from_seed(seed: &[u8]) -> KeyPair {
        let mut enc = Encoder::new("keygen");
        enc.bytes(seed);
        let sk = 1 + enc.to_digest().to_u64() % (P - 2);
        KeyPair {
            public_key: PublicKey(pow_mod(GENERATOR, sk)),
            secret_key: SecretKey(sk),
        }
    }

    pub fn secret_key(&self) -> &SecretKey {
        &self.secret_key
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(message, &self.secret_key, self.public_key)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: PublicKey,
    #[serde(with = "sig_bytes")]
    pub bytes: [u8; 16],
}

mod sig_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| serde::de::Error::custom("expected 32 hex chars"))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig[{:?}]", self.signer)
    }
}

impl Encode for Signature {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.signer.0).bytes(&self.bytes);
    }
}

fn challenge(r: u64, pk: PublicKey, message: &[u8]) -> u64 {
    let mut enc = Encoder::new("schnorr-challenge");
    enc.u64(r).u64(pk.0).bytes(message);
    exp_from_digest(enc.to_digest())
}

pub fn sign(message: &[u8], sk: &SecretKey, pk: PublicKey) -> Signature {
    let mut enc = Encoder::new("schnorr-nonce");
    enc.u64(sk.0).bytes(message);
    let k = 1 + exp_from_digest(enc.to_digest()) % (EXP_MOD - 1);
    let r = pow_mod(GENERATOR, k);
    let e = challenge(r, pk, message);
    let s = ((k as u128 + e as u128 * sk.0 as u128) % EXP_MOD as u128) as u64;
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&r.to_le_bytes());
    bytes[8..].copy_from_slice(&s.to_le_bytes());
    Signature { signer: pk, bytes }
}

/// Malformed signatures simply fail to verify.
pub fn verify(message: &[u8], signature: &Signature, pk: &PublicKey) -> bool {
    let r = u64::from_le_bytes(signature.bytes[..8].try_into().unwrap());
    let s = u64::from_le_bytes(signature.bytes[8..].try_into().unwrap());
    if r == 0 || r >= P || s >= EXP_MOD || pk.0 == 0 || pk.0 >= P {
        return false;
    }
    let e = challenge(r, *pk, message);
    pow_mod(GENERATOR, s) == mul_mod(r, pow_mod(pk.0, e))
}

/// A set of individual signatures over one digest, valid when enough
/// distinct authorized signers are present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiSignature {
    pub message_digest: Digest,
    pub signatures: Vec<Signature>,
    pub threshold: usize,
}

impl MultiSignature {
    /// Builds a multisig, keeping only the first signature of each signer.
    pub fn new(message_digest: Digest, threshold: usize, signatures: impl IntoIterator<Item = Signature>) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        let signatures = signatures.into_iter().filter(|s| seen.insert(s.signer)).collect();
        MultiSignature { message_digest, signatures, threshold }
    }

    pub fn signers(&self) -> Vec<PublicKey> {
        self.signatures.iter().map(|s| s.signer).collect()
    }
}

impl Encode for MultiSignature {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(&self.message_digest).u64(self.threshold as u64).list(&self.signatures);
    }
}

/// Counts distinct authorized signers whose signature over the multisig's
/// digest verifies. Unauthorized or repeated signers are ignored.
pub fn count_valid_signers(ms: &MultiSignature, authorized: &[PublicKey]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for sig in &ms.signatures {
        if authorized.contains(&sig.signer)
            && !seen.contains(&sig.signer)
            && verify(&ms.message_digest.0, sig, &sig.signer)
        {
            seen.insert(sig.signer);
        }
    }
    seen.len()
}

pub fn multisig_verify(ms: &MultiSignature, authorized: &[PublicKey], m: usize) -> bool {
    m > 0 && count_valid_signers(ms, authorized) >= m
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct EnclaveId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationQuote {
    pub enclave_id: EnclaveId,
    pub program_digest: Digest,
    pub enclave_public_key: PublicKey,
    pub endorsement: Signature,
}

fn quote_body(enclave_id: EnclaveId, program_digest: &Digest, pk: PublicKey) -> Vec<u8> {
    let mut enc = Encoder::new("attestation-quote");
    enc.u64(enclave_id.0).digest(program_digest).u64(pk.0);
    enc.finish()
}

impl AttestationQuote {
    pub fn verify(&self, root: &PublicKey) -> bool {
        let body = quote_body(self.enclave_id, &self.program_digest, self.enclave_public_key);
        self.endorsement.signer == *root && verify(&body, &self.endorsement, root)
    }
}

impl Encode for AttestationQuote {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.enclave_id.0)
            .digest(&self.program_digest)
            .u64(self.enclave_public_key.0)
            .nested(&self.endorsement);
    }
}

/// The simulated hardware manufacturer whose root key endorses quotes.
#[derive(Debug, Clone)]
pub struct Manufacturer {
    root: KeyPair,
}

impl Manufacturer {
    pub fn new(seed: &[u8]) -> Self {
        let mut material = b"manufacturer-root/".to_vec();
        material.extend_from_slice(seed);
        Manufacturer { root: KeyPair::from_seed(&material) }
    }

    pub fn root_public_key(&self) -> PublicKey {
        self.root.public_key
    }

    /// Key material fused into every genuine platform for sealing.
    pub fn sealing_key(&self) -> Digest {
        let mut material = b"sealing/".to_vec();
        material.extend_from_slice(&self.root.secret_key().canonical_bytes());
        hash(&material)
    }

    pub fn attest(&self, enclave_id: EnclaveId, program_digest: Digest, pk: PublicKey) -> AttestationQuote {
        let endorsement = self.root.sign(&quote_body(enclave_id, &program_digest, pk));
        AttestationQuote { enclave_id, program_digest, enclave_public_key: pk, endorsement }
    }
}
