//! Schnorr group parameters: a prime-order subgroup of Z_p*.
//!
//! The baked-in default is a 512-bit p with a 160-bit q, far below modern
//! security margins, on purpose: experiments here measure sizes and flows,
//! not attacker cost, and small groups keep scenario runs fast. Larger groups
//! can be loaded from config; [`GroupParams::validate`] re-checks primality
//! and the subgroup order on every load, so a corrupted config fails loudly.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use super::drbg::Drbg;
use super::CryptoError;

/// Default 512-bit prime modulus (hex, big-endian).
pub const DEFAULT_P_HEX: &str = "ce120c0b56f5a143c2a9ae46de60260fd40a487954a6d8a538a3b01c716db629ce120c0b56f5a143c2a9aff1a73653a510f2a501ac0dd4dc776889886d74531b";
/// Default 160-bit subgroup order (hex, big-endian). q divides p - 1.
pub const DEFAULT_Q_HEX: &str = "93a23cbe5e1c712f427e69572f516f8558643f35";
/// Default generator of the order-q subgroup (hex, big-endian).
pub const DEFAULT_G_HEX: &str = "74f3390bce4f3c255070d4d533cf2a5b0f44e011d38ce103072dc245cee6d1722e2c2c853fbc2a89beddabaea314d6bea9387d8a8ed3d43c3d582c77714b48c3";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    #[serde(with = "super::serde_hex::biguint")]
    pub p: BigUint,
    #[serde(with = "super::serde_hex::biguint")]
    pub q: BigUint,
    #[serde(with = "super::serde_hex::biguint")]
    pub g: BigUint,
}

impl Default for GroupParams {
    fn default() -> GroupParams {
        GroupParams::from_hex(DEFAULT_P_HEX, DEFAULT_Q_HEX, DEFAULT_G_HEX)
            .expect("baked-in group constants are valid")
    }
}

impl GroupParams {
    /// Parse and validate a group from hex strings.
    pub fn from_hex(p: &str, q: &str, g: &str) -> Result<GroupParams, CryptoError> {
        let parse = |s: &str, what: &str| -> Result<BigUint, CryptoError> {
            let bytes = hex::decode(s)
                .map_err(|_| CryptoError::InvalidGroup(format!("{what} is not valid hex")))?;
            Ok(BigUint::from_bytes_be(&bytes))
        };
        let params = GroupParams {
            p: parse(p, "p")?,
            q: parse(q, "q")?,
            g: parse(g, "g")?,
        };
        params.validate()?;
        Ok(params)
    }

    /// Check the structural requirements: p and q prime, q | p - 1, and g a
    /// generator of the order-q subgroup.
    pub fn validate(&self) -> Result<(), CryptoError> {
        if self.q.bits() < 160 {
            return Err(CryptoError::InvalidGroup(format!(
                "q must be at least 160 bits, got {}",
                self.q.bits()
            )));
        }
        if !is_probable_prime(&self.p) {
            return Err(CryptoError::InvalidGroup("p is not prime".into()));
        }
        if !is_probable_prime(&self.q) {
            return Err(CryptoError::InvalidGroup("q is not prime".into()));
        }
        let one = BigUint::one();
        if (&self.p - &one) % &self.q != BigUint::zero() {
            return Err(CryptoError::InvalidGroup("q does not divide p - 1".into()));
        }
        if self.g <= one || self.g >= self.p {
            return Err(CryptoError::InvalidGroup("g out of range".into()));
        }
        if self.g.modpow(&self.q, &self.p) != one {
            return Err(CryptoError::InvalidGroup("g does not have order q".into()));
        }
        Ok(())
    }

    /// Byte width of elements of Z_p (public keys).
    pub fn p_len(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    /// Byte width of exponents mod q (private keys, signature halves).
    pub fn q_len(&self) -> usize {
        (self.q.bits() as usize).div_ceil(8)
    }

    /// Fixed-width big-endian encoding of a group element.
    pub fn encode_element(&self, x: &BigUint) -> Vec<u8> {
        to_fixed_be(x, self.p_len())
    }

    /// Fixed-width big-endian encoding of an exponent.
    pub fn encode_scalar(&self, x: &BigUint) -> Vec<u8> {
        to_fixed_be(x, self.q_len())
    }
}

pub(crate) fn to_fixed_be(x: &BigUint, width: usize) -> Vec<u8> {
    let raw = x.to_bytes_be();
    assert!(raw.len() <= width, "value wider than field");
    let mut out = vec![0u8; width];
    out[width - raw.len()..].copy_from_slice(&raw);
    out
}

/// Miller-Rabin with 40 deterministic witness draws. Good enough to catch a
/// mistyped config; the baked-in constants were generated with a CAS and are
/// additionally pinned by unit test.
fn is_probable_prime(n: &BigUint) -> bool {
    let one = BigUint::one();
    let two = &one + &one;
    if *n < two {
        return false;
    }
    if *n == two {
        return true;
    }
    if n % &two == BigUint::zero() {
        return false;
    }
    for small in [3u32, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let s = BigUint::from(small);
        if *n == s {
            return true;
        }
        if n % &s == BigUint::zero() {
            return false;
        }
    }
    // n - 1 = d * 2^r with d odd.
    let n_minus_1 = n - &one;
    let mut d = n_minus_1.clone();
    let mut r = 0u32;
    while &d % &two == BigUint::zero() {
        d >>= 1;
        r += 1;
    }
    // Witnesses come from the hash stream seeded by n itself: deterministic
    // across runs, independent of caller state.
    let mut seed = [0u8; 32];
    let nb = n.to_bytes_be();
    for (i, b) in nb.iter().enumerate() {
        seed[i % 32] ^= *b;
    }
    let mut rng = Drbg::new(seed);
    let byte_len = (n.bits() as usize).div_ceil(8);
    'witness: for _ in 0..40 {
        let a = loop {
            let cand = BigUint::from_bytes_be(&rng.bytes(byte_len));
            if cand >= two && cand < n_minus_1 {
                break cand;
            }
        };
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 0..r.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
