//! Deterministic hash-counter randomness.
//!
//! The output stream is the concatenation of `H("drbg", seed || be64(i))`
//! for i = 0, 1, 2, ...; nothing else feeds it, so a seed pins every byte the
//! generator will ever emit. All randomness in the lab (key generation,
//! workload draws, wallet ids) flows through this type; reseeding from the
//! OS would silently break scenario replay, so there is deliberately no such
//! constructor.

use serde::{Deserialize, Serialize};

use super::hash::{digest_parts, DomainTag, DIGEST_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Drbg {
    #[serde(with = "crate::crypto::serde_hex::arr32")]
    seed: [u8; 32],
    counter: u64,
    #[serde(with = "crate::crypto::serde_hex::arr32")]
    buf: [u8; 32],
    buf_pos: usize,
}

impl Drbg {
    pub fn new(seed: [u8; 32]) -> Drbg {
        Drbg {
            seed,
            counter: 0,
            buf: [0u8; 32],
            buf_pos: DIGEST_LEN,
        }
    }

    /// Derive an independent child generator. Forking consumes one block of
    /// the parent stream, so distinct forks of one parent never coincide even
    /// under the same label.
    pub fn fork(&mut self, label: &[u8]) -> Drbg {
        let mut base = [0u8; 32];
        self.fill_bytes(&mut base);
        Drbg::new(digest_parts(DomainTag::Drbg, &[&base, label]))
    }

    fn refill(&mut self) {
        self.buf = digest_parts(DomainTag::Drbg, &[&self.seed, &self.counter.to_be_bytes()]);
        self.counter += 1;
        self.buf_pos = 0;
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        let mut written = 0;
        while written < out.len() {
            if self.buf_pos == DIGEST_LEN {
                self.refill();
            }
            let n = (out.len() - written).min(DIGEST_LEN - self.buf_pos);
            out[written..written + n].copy_from_slice(&self.buf[self.buf_pos..self.buf_pos + n]);
            self.buf_pos += n;
            written += n;
        }
    }

    pub fn bytes(&mut self, n: usize) -> Vec<u8> {
        let mut v = vec![0u8; n];
        self.fill_bytes(&mut v);
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut b = [0u8; 8];
        self.fill_bytes(&mut b);
        u64::from_be_bytes(b)
    }

    /// Uniform draw from `[0, n)` by rejection sampling; exact, no modulo
    /// bias.
    pub fn gen_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "gen_range over empty range");
        // 2^64 mod n; accept draws below 2^64 - rem.
        let rem = ((u64::MAX % n) + 1) % n;
        loop {
            let v = self.next_u64();
            if rem == 0 || v <= u64::MAX - rem {
                return v % n;
            }
        }
    }

    /// Bernoulli draw. `p` is clamped to [0, 1].
    pub fn gen_bool(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        let threshold = (p * (u64::MAX as f64 + 1.0)) as u128;
        (self.next_u64() as u128) < threshold
    }
}
