//! Winternitz one-time signatures (w = 16, n = 32).
//!
//! A 256-bit message digest splits into 64 base-16 digits; a checksum of
//! sum(15 - digit) over those (at most 960, so three more base-16 digits)
//! is appended, for 67 chains total. The secret key is 67 random 32-byte
//! chain starts, the public key the 67 chain ends after 15 hash steps, and a
//! signature exposes each chain at the depth of its digit. Verification
//! walks the remaining steps and compares against the public key.
//!
//! Keys, public keys and signatures are all 67·32 = 2144 bytes.
//!
//! Statelessness is deliberate: one-time enforcement lives in the key-pair
//! layer above, which tracks use. Signing the same secret twice here is
//! possible and unsafe, exactly like handing the same physical one-time pad
//! to two couriers.

use super::drbg::Drbg;
use super::hash::{digest_parts, DomainTag, DIGEST_LEN};

/// Winternitz parameter: digits are base-16 (4 bits each).
pub const W: u32 = 16;
/// Message digits: 256 bits / 4 bits per digit.
pub const LEN1: usize = 64;
/// Checksum digits: max checksum 64·15 = 960 < 16^3.
pub const LEN2: usize = 3;
/// Total chains.
pub const LEN: usize = LEN1 + LEN2;
/// Byte size of secret keys, public keys and signatures alike.
pub const KEY_LEN: usize = LEN * DIGEST_LEN;

/// Generate a key pair from the randomness stream: (public, private).
pub fn keygen(rng: &mut Drbg) -> (Vec<u8>, Vec<u8>) {
    let private = rng.bytes(KEY_LEN);
    (derive_public(&private), private)
}

/// Derive the chain-end public key from a private key.
pub fn derive_public(private: &[u8]) -> Vec<u8> {
    assert_eq!(private.len(), KEY_LEN);
    let mut public = Vec::with_capacity(KEY_LEN);
    for i in 0..LEN {
        let start: [u8; 32] = private[i * 32..(i + 1) * 32].try_into().unwrap();
        public.extend(chain(start, (W - 1) as usize));
    }
    public
}

/// Sign a message: expose each chain at the depth of its digit.
pub fn sign(private: &[u8], msg: &[u8]) -> Vec<u8> {
    assert_eq!(private.len(), KEY_LEN);
    let digits = message_digits(msg);
    let mut sig = Vec::with_capacity(KEY_LEN);
    for (i, &d) in digits.iter().enumerate() {
        let start: [u8; 32] = private[i * 32..(i + 1) * 32].try_into().unwrap();
        sig.extend(chain(start, d as usize));
    }
    sig
}

/// Verify by walking each chain the remaining 15 - digit steps.
pub fn verify(public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    if public.len() != KEY_LEN || sig.len() != KEY_LEN {
        return false;
    }
    let digits = message_digits(msg);
    for (i, &d) in digits.iter().enumerate() {
        let start: [u8; 32] = sig[i * 32..(i + 1) * 32].try_into().unwrap();
        let end = chain(start, (W - 1) as usize - d as usize);
        if end != public[i * 32..(i + 1) * 32] {
            return false;
        }
    }
    true
}

/// The 67 base-16 digits for a message: 64 digest digits plus the big-endian
/// checksum digits of sum(15 - digit).
fn message_digits(msg: &[u8]) -> [u8; LEN] {
    let digest = digest_parts(DomainTag::Wots, &[msg]);
    let mut digits = [0u8; LEN];
    for (i, byte) in digest.iter().enumerate() {
        digits[2 * i] = byte >> 4;
        digits[2 * i + 1] = byte & 0x0f;
    }
    let checksum: u32 = digits[..LEN1].iter().map(|&d| (W - 1) - d as u32).sum();
    digits[LEN1] = ((checksum >> 8) & 0x0f) as u8;
    digits[LEN1 + 1] = ((checksum >> 4) & 0x0f) as u8;
    digits[LEN1 + 2] = (checksum & 0x0f) as u8;
    digits
}

fn chain(start: [u8; 32], steps: usize) -> [u8; 32] {
    let mut v = start;
    for _ in 0..steps {
        v = digest_parts(DomainTag::Wots, &[&v]);
    }
    v
}
