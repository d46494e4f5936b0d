//! Desk-scale laboratory for post-quantum crypto-agility in a token-based CBDC.
//!
//! The crate wires together five layers:
//!
//! * [`crypto`]: a pluggable signature suite: classical Schnorr over a
//!   prime-order subgroup of Z_p*, one-time Winternitz signatures, a stateful
//!   Merkle many-time scheme on top of them, and classical+PQ composite
//!   signatures with a switchable verification policy.
//! * [`pki`]: hybrid certificates (classical and/or PQ keys on one cert, or
//!   two linked certs), chain verification under four policies.
//! * [`register`]: a UTxO-style token register with consume-all semantics,
//!   version deadlines for the classical-to-PQ migration, signed receipts and
//!   a line-delimited event log.
//! * [`wallet`]: software/hardware wallets across old/new generations:
//!   version negotiation, payment construction, offline deferral, holding
//!   conversion.
//! * [`sim`]: a deterministic discrete-event simulation of the whole system
//!   under a configurable quantum attacker, emitting per-tick metrics.
//!
//! Everything is driven by seeded, hash-based randomness ([`crypto::Drbg`])
//! so that any scenario replays byte-identically from its config.
//!
//! None of the cryptography here is production-grade: parameters are sized
//! for experiment turnaround, not for security margins.

pub mod crypto;
pub mod pki;
pub mod register;
pub mod sim;
pub mod wallet;

pub use crypto::{Drbg, KeyPair, PublicKey, SchemeConfig, SchemeId, Signature, VerificationPolicy};
pub use register::{Receipt, RegisterState, Token, TokenId, TransferRequest, Version};
pub use sim::{run_scenario, ScenarioConfig};
pub use wallet::WalletState;

/// Simulation time. One tick is the atomic scheduling unit everywhere:
/// certificate validity, register deadlines and the event loop all count in
/// ticks.
pub type Tick = u64;
