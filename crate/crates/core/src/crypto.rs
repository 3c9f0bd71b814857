//! Key material and the primitives every scheme is built from.
//!
//! One SHA-256 instance backs the one-way function `f`, the blinding
//! function `g`, the OFT mixing function and the node-code derivation; each
//! use is separated by a one-byte prefix. Key wrapping is RFC 3394 AES-KW
//! with a 256-bit key-encrypting key, so unwrapping under the wrong key is
//! detected by the integrity check rather than yielding garbage.

use std::fmt;
use std::hash::{Hash, Hasher};

use aes_kw::KekAes256;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tree::NodeCode;

/// Width of every key in bytes.
pub const KEY_LEN: usize = 32;
/// AES-KW output for a 32-byte payload: payload plus the 8-byte integrity block.
pub const WRAPPED_LEN: usize = KEY_LEN + 8;

const DOMAIN_DERIVE: u8 = 0x01;
const DOMAIN_BLIND: u8 = 0x02;
const DOMAIN_MIX: u8 = 0x03;
const DOMAIN_CODE: u8 = 0x04;

/// What a key is used for. Metadata only: never part of equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyRole {
    Individual,
    Middle,
    Group,
}

/// A 256-bit symmetric secret.
#[derive(Clone, Copy)]
pub struct SymKey {
    bytes: [u8; KEY_LEN],
    role: KeyRole,
}

impl SymKey {
    pub const fn new(bytes: [u8; KEY_LEN], role: KeyRole) -> Self {
        Self { bytes, role }
    }

    pub const fn zero() -> Self {
        Self::new([0; KEY_LEN], KeyRole::Middle)
    }

    pub fn from_hex(s: &str, role: KeyRole) -> Result<Self> {
        let raw = decode_hex(s)?;
        let bytes: [u8; KEY_LEN] = raw
            .try_into()
            .map_err(|v: Vec<u8>| Error::InvalidKeyLength(v.len()))?;
        Ok(Self::new(bytes, role))
    }

    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }

    pub fn with_role(mut self, role: KeyRole) -> Self {
        self.role = role;
        self
    }

    /// First four bytes in hex; used in dumps, trace logs and witness chains.
    pub fn fingerprint(&self) -> String {
        encode_hex(&self.bytes[..4])
    }

    pub fn to_hex(&self) -> String {
        encode_hex(&self.bytes)
    }
}

impl PartialEq for SymKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for SymKey {}

impl PartialOrd for SymKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SymKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.bytes.cmp(&other.bytes)
    }
}

impl Hash for SymKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.bytes.hash(state);
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymKey({:?}:{})", self.role, self.fingerprint())
    }
}

fn hash_with(domain: u8, parts: &[&[u8]]) -> [u8; KEY_LEN] {
    let mut h = Sha256::new();
    h.update([domain]);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// The one-way function `f`: used to refresh the group key at join.
pub fn derive(key: &SymKey) -> SymKey {
    SymKey::new(hash_with(DOMAIN_DERIVE, &[&key.bytes]), key.role)
}

/// `f(group_key XOR code)`: the key of the middle node carrying `code`.
pub fn derive_with_code(group_key: &SymKey, code: &NodeCode) -> Result<SymKey> {
    let block = encode_code(code)?;
    let mut mixed = group_key.bytes;
    for (m, c) in mixed.iter_mut().zip(block.iter()) {
        *m ^= c;
    }
    Ok(SymKey::new(
        hash_with(DOMAIN_CODE, &[&mixed]),
        KeyRole::Middle,
    ))
}

/// Canonical 32-byte block for a node code: ASCII digits right-aligned, zero-padded on the left.
pub fn encode_code(code: &NodeCode) -> Result<[u8; KEY_LEN]> {
    let digits = code.digits();
    if digits.is_empty() {
        return Err(Error::EmptyCode);
    }
    if digits.len() > KEY_LEN {
        return Err(Error::CodeTooLong(digits.len()));
    }
    let mut block = [0u8; KEY_LEN];
    let offset = KEY_LEN - digits.len();
    for (slot, d) in block[offset..].iter_mut().zip(digits) {
        *slot = b'0' + d;
    }
    Ok(block)
}

/// The OFT blinding function `g`.
pub fn blind(key: &SymKey) -> SymKey {
    SymKey::new(hash_with(DOMAIN_BLIND, &[&key.bytes]), key.role)
}

/// The OFT mixing function. Positional: `mix(a, b) != mix(b, a)`.
pub fn mix(left_blinded: &SymKey, right_blinded: &SymKey) -> SymKey {
    SymKey::new(
        hash_with(DOMAIN_MIX, &[&left_blinded.bytes, &right_blinded.bytes]),
        KeyRole::Middle,
    )
}

/// A fresh key from the caller's seeded stream.
pub fn random_key<R: RngCore + ?Sized>(rng: &mut R, role: KeyRole) -> SymKey {
    let mut bytes = [0u8; KEY_LEN];
    rng.fill_bytes(&mut bytes);
    SymKey::new(bytes, role)
}

/// Raw AES-KW of `payload` under `kek`.
pub fn wrap_bytes(kek: &SymKey, payload: &SymKey) -> [u8; WRAPPED_LEN] {
    let cipher = KekAes256::from(kek.bytes);
    let mut out = [0u8; WRAPPED_LEN];
    cipher
        .wrap(&payload.bytes, &mut out)
        .expect("AES-KW accepts a 32-byte payload into a 40-byte buffer");
    out
}

/// Inverse of [`wrap_bytes`]; fails if `kek` is not the wrapping key.
pub fn unwrap_bytes(kek: &SymKey, ciphertext: &[u8; WRAPPED_LEN], role: KeyRole) -> Result<SymKey> {
    let cipher = KekAes256::from(kek.bytes);
    let mut out = [0u8; KEY_LEN];
    cipher
        .unwrap(ciphertext, &mut out)
        .map_err(|_| Error::UnwrapFailed)?;
    Ok(SymKey::new(out, role))
}

pub(crate) fn encode_hex(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

pub(crate) fn decode_hex(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    hex::decode(s).map_err(|_| Error::InvalidHex(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn code(s: &str) -> NodeCode {
        s.parse().unwrap()
    }

    #[test]
    fn derive_is_deterministic_and_not_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let k = random_key(&mut rng, KeyRole::Group);
        assert_eq!(derive(&k), derive(&k));
        assert_ne!(derive(&k), k);
    }

    #[test]
    fn code_derivation_separates_codes() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let k = random_key(&mut rng, KeyRole::Group);
        let a = derive_with_code(&k, &code("278")).unwrap();
        let b = derive_with_code(&k, &code("273")).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, derive_with_code(&k, &code("278")).unwrap());
    }

    #[test]
    fn code_encoding_is_right_aligned_ascii() {
        let block = encode_code(&code("27")).unwrap();
        assert_eq!(&block[30..], b"27");
        assert!(block[..30].iter().all(|&b| b == 0));
        // "027" and "27" must not collide
        assert_ne!(encode_code(&code("027")).unwrap(), block);
    }

    #[test]
    fn overlong_code_is_rejected() {
        let long: NodeCode = "1".repeat(33).parse().unwrap();
        assert!(matches!(encode_code(&long), Err(Error::CodeTooLong(33))));
    }

    #[test]
    fn blind_and_mix_are_domain_separated() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..64 {
            let a = random_key(&mut rng, KeyRole::Middle);
            let b = random_key(&mut rng, KeyRole::Middle);
            assert_ne!(blind(&a), derive(&a));
            assert_ne!(mix(&a, &b), mix(&b, &a));
            let images = [
                derive(&a),
                blind(&a),
                mix(&a, &a),
                derive_with_code(&a, &code("1")).unwrap(),
            ];
            for i in 0..images.len() {
                for j in i + 1..images.len() {
                    assert_ne!(images[i], images[j]);
                }
            }
        }
    }

    #[test]
    fn role_is_not_part_of_equality() {
        let k = SymKey::new([7; 32], KeyRole::Group);
        assert_eq!(k, k.with_role(KeyRole::Individual));
    }

    #[test]
    fn wrap_round_trip_and_wrong_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let kek = random_key(&mut rng, KeyRole::Individual);
            let other = random_key(&mut rng, KeyRole::Individual);
            let payload = random_key(&mut rng, KeyRole::Group);
            let ct = wrap_bytes(&kek, &payload);
            assert_eq!(unwrap_bytes(&kek, &ct, KeyRole::Group).unwrap(), payload);
            assert!(matches!(
                unwrap_bytes(&other, &ct, KeyRole::Group),
                Err(Error::UnwrapFailed)
            ));
        }
    }

    #[test]
    fn seeded_stream_is_reproducible() {
        let mut a = ChaCha20Rng::seed_from_u64(9);
        let mut b = ChaCha20Rng::seed_from_u64(9);
        let xs: Vec<_> = (0..8).map(|_| random_key(&mut a, KeyRole::Group)).collect();
        let ys: Vec<_> = (0..8).map(|_| random_key(&mut b, KeyRole::Group)).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs[0], xs[1]);
    }

    #[test]
    fn hex_round_trip() {
        let k = SymKey::new([0xab; 32], KeyRole::Middle);
        assert_eq!(SymKey::from_hex(&k.to_hex(), KeyRole::Middle).unwrap(), k);
        assert!(SymKey::from_hex("abc", KeyRole::Middle).is_err());
        assert!(SymKey::from_hex("abcd", KeyRole::Middle).is_err());
    }
}
