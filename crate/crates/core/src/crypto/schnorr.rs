//! Classical Schnorr signatures over a prime-order subgroup of Z_p*.
//!
//! Textbook construction: private x, public y = g^x mod p, signature
//! (e, s) with e = H(r || m) mod q, s = k + x·e mod q. Verification
//! recomputes r' = g^s · y^(q-e) mod p and checks H(r' || m) mod q == e.
//!
//! Nonces are derived deterministically as H(private || message), so signing
//! never needs fresh randomness and a given (key, message) pair always
//! produces the same signature, the property the scenario replay machinery
//! leans on.

use num_bigint::BigUint;
use num_traits::{One, Zero};

use super::drbg::Drbg;
use super::group::GroupParams;
use super::hash::{digest_parts, DomainTag};

/// Generate a key pair: returns (public, private) in fixed-width big-endian
/// encoding (p-width and q-width respectively).
pub fn keygen(group: &GroupParams, rng: &mut Drbg) -> (Vec<u8>, Vec<u8>) {
    let x = random_scalar(group, rng);
    let y = group.g.modpow(&x, &group.p);
    (group.encode_element(&y), group.encode_scalar(&x))
}

/// Sign `msg`. The signature is e || s, each q-width bytes.
pub fn sign(group: &GroupParams, private: &[u8], msg: &[u8]) -> Vec<u8> {
    let x = BigUint::from_bytes_be(private);
    // Deterministic nonce; rehash with a counter in the (vanishing) case the
    // reduction lands on zero.
    let mut k = BigUint::zero();
    for ctr in 0u32.. {
        let kb = digest_parts(DomainTag::Schnorr, &[private, msg, &ctr.to_be_bytes()]);
        k = BigUint::from_bytes_be(&kb) % &group.q;
        if !k.is_zero() {
            break;
        }
    }
    let r = group.g.modpow(&k, &group.p);
    let e = challenge(group, &r, msg);
    let s = (&k + x * &e) % &group.q;
    let mut out = group.encode_scalar(&e);
    out.extend(group.encode_scalar(&s));
    out
}

/// Verify an e || s signature against a p-width public key. Wrong length is
/// the caller's structural problem; here it just fails.
pub fn verify(group: &GroupParams, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    let q_len = group.q_len();
    if sig.len() != 2 * q_len || public.len() != group.p_len() {
        return false;
    }
    let y = BigUint::from_bytes_be(public);
    if y <= BigUint::one() || y >= group.p {
        return false;
    }
    let e = BigUint::from_bytes_be(&sig[..q_len]);
    let s = BigUint::from_bytes_be(&sig[q_len..]);
    if e >= group.q || s >= group.q {
        return false;
    }
    // r' = g^s * y^(q - e): y has order q, so y^(q-e) = y^(-e).
    let neg_e = (&group.q - &e) % &group.q;
    let r = (group.g.modpow(&s, &group.p) * y.modpow(&neg_e, &group.p)) % &group.p;
    challenge(group, &r, msg) == e
}

pub fn signature_len(group: &GroupParams) -> usize {
    2 * group.q_len()
}

fn challenge(group: &GroupParams, r: &BigUint, msg: &[u8]) -> BigUint {
    let eb = digest_parts(DomainTag::Schnorr, &[&group.encode_element(r), msg]);
    BigUint::from_bytes_be(&eb) % &group.q
}

fn random_scalar(group: &GroupParams, rng: &mut Drbg) -> BigUint {
    // Rejection-sample a uniform scalar in [1, q-1].
    let q_len = group.q_len();
    loop {
        let cand = BigUint::from_bytes_be(&rng.bytes(q_len));
        if !cand.is_zero() && cand < group.q {
            return cand;
        }
    }
}
