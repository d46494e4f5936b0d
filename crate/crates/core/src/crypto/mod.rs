//! The pluggable signature suite.
//!
//! Four schemes share one key/signature surface, addressed by [`SchemeId`]:
//!
//! | id | scheme            | keys                | signature            |
//! |----|-------------------|---------------------|----------------------|
//! | 1  | classical-schnorr | 64 B / 20 B         | 40 B                 |
//! | 2  | pq-wots           | 2144 B / 2144 B     | 2144 B, one-time     |
//! | 3  | pq-mss            | 32 B root / 32 B seed | 4 + 2144 + 32·h B  |
//! | 4  | hybrid-cm         | composite of 1 + PQ | both, length-framed  |
//!
//! (Key and signature sizes above are raw scheme material; canonical wire
//! encodings add a leading scheme byte.)
//!
//! Statefulness is explicit: one-time and Merkle keys track consumed leaves
//! in [`MerkleKeyState`] and refuse reuse/exhaustion with typed errors
//! instead of silently weakening.

pub mod drbg;
pub mod group;
pub mod hash;
pub mod mss;
pub mod schnorr;
pub(crate) mod serde_hex;
pub mod wots;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use drbg::Drbg;
pub use group::GroupParams;
pub use hash::{hash, DomainTag, DIGEST_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("UNKNOWN_DOMAIN_TAG: {0:?} is not a registered hash domain")]
    UnknownDomainTag(String),
    #[error("UNSUPPORTED_HEIGHT: tree height {0} outside [{min}, {max}]", min = mss::MIN_HEIGHT, max = mss::MAX_HEIGHT)]
    UnsupportedHeight(u32),
    #[error("OTS_REUSE: one-time key has already signed")]
    OtsReuse,
    #[error("MSS_EXHAUSTED: all leaves of the Merkle key are spent")]
    MssExhausted,
    #[error("MALFORMED_SIGNATURE: {0}")]
    MalformedSignature(String),
    #[error("INVALID_GROUP: {0}")]
    InvalidGroup(String),
    #[error("WRONG_SCHEME: {0}")]
    WrongScheme(String),
}

impl CryptoError {
    /// Stable machine-readable code, used verbatim in CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            CryptoError::UnknownDomainTag(_) => "UNKNOWN_DOMAIN_TAG",
            CryptoError::UnsupportedHeight(_) => "UNSUPPORTED_HEIGHT",
            CryptoError::OtsReuse => "OTS_REUSE",
            CryptoError::MssExhausted => "MSS_EXHAUSTED",
            CryptoError::MalformedSignature(_) => "MALFORMED_SIGNATURE",
            CryptoError::InvalidGroup(_) => "INVALID_GROUP",
            CryptoError::WrongScheme(_) => "WRONG_SCHEME",
        }
    }
}

/// Scheme identifiers. The numeric codes are wire format (they lead every
/// encoded key and signature), so they are frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "classical-schnorr")]
    ClassicalSchnorr,
    #[serde(rename = "pq-wots")]
    PqWots,
    #[serde(rename = "pq-mss")]
    PqMss,
    #[serde(rename = "hybrid-cm")]
    HybridCm,
}

impl SchemeId {
    pub fn code(self) -> u8 {
        match self {
            SchemeId::ClassicalSchnorr => 1,
            SchemeId::PqWots => 2,
            SchemeId::PqMss => 3,
            SchemeId::HybridCm => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<SchemeId> {
        match code {
            1 => Some(SchemeId::ClassicalSchnorr),
            2 => Some(SchemeId::PqWots),
            3 => Some(SchemeId::PqMss),
            4 => Some(SchemeId::HybridCm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::ClassicalSchnorr => "classical-schnorr",
            SchemeId::PqWots => "pq-wots",
            SchemeId::PqMss => "pq-mss",
            SchemeId::HybridCm => "hybrid-cm",
        }
    }

    pub fn parse(s: &str) -> Option<SchemeId> {
        [
            SchemeId::ClassicalSchnorr,
            SchemeId::PqWots,
            SchemeId::PqMss,
            SchemeId::HybridCm,
        ]
        .into_iter()
        .find(|id| id.name() == s)
    }

    pub fn is_post_quantum(self) -> bool {
        matches!(self, SchemeId::PqWots | SchemeId::PqMss)
    }
}

/// Which signature families must hold for a composite or certificate check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerificationPolicy {
    #[serde(rename = "classical-only")]
    ClassicalOnly,
    #[serde(rename = "pq-only")]
    PqOnly,
    #[serde(rename = "both")]
    Both,
    #[serde(rename = "either")]
    Either,
}

impl VerificationPolicy {
    pub const ALL: [VerificationPolicy; 4] = [
        VerificationPolicy::ClassicalOnly,
        VerificationPolicy::PqOnly,
        VerificationPolicy::Both,
        VerificationPolicy::Either,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VerificationPolicy::ClassicalOnly => "classical-only",
            VerificationPolicy::PqOnly => "pq-only",
            VerificationPolicy::Both => "both",
            VerificationPolicy::Either => "either",
        }
    }

    pub fn parse(s: &str) -> Option<VerificationPolicy> {
        VerificationPolicy::ALL.into_iter().find(|p| p.name() == s)
    }

    /// The policy's two-valued combination rule.
    pub fn combine(self, classical_ok: bool, pq_ok: bool) -> bool {
        match self {
            VerificationPolicy::ClassicalOnly => classical_ok,
            VerificationPolicy::PqOnly => pq_ok,
            VerificationPolicy::Both => classical_ok && pq_ok,
            VerificationPolicy::Either => classical_ok || pq_ok,
        }
    }
}

/// Suite-wide parameters. One of these travels with every register, wallet
/// and CA so a scenario can swap in a bigger group or taller trees without
/// touching call sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub group: GroupParams,
    /// Default Merkle tree height for pq-mss keygen.
    pub mss_height: u32,
    /// Which PQ scheme the hybrid composite pairs with the classical one;
    /// used for size reporting.
    pub hybrid_pq: SchemeId,
}

impl Default for SchemeConfig {
    fn default() -> SchemeConfig {
        SchemeConfig {
            group: GroupParams::default(),
            mss_height: 8,
            hybrid_pq: SchemeId::PqMss,
        }
    }
}

impl SchemeConfig {
    pub fn with_mss_height(height: u32) -> SchemeConfig {
        SchemeConfig {
            mss_height: height,
            ..SchemeConfig::default()
        }
    }
}

/// Consumption state for one-time and Merkle keys.
///
/// Winternitz keys are modeled as height-0 trees with a single leaf, which
/// makes "signed at most once" and "exhausted after 2^h" the same check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleKeyState {
    pub height: u32,
    /// Next unspent leaf; leaves are allocated strictly in order.
    pub next_leaf: u64,
    /// Every leaf ever spent. Grows monotonically; kept explicit so tests
    /// and audits can check one-time discipline without trusting the counter.
    pub used_leaves: BTreeSet<u64>,
}

impl MerkleKeyState {
    fn new(height: u32) -> MerkleKeyState {
        MerkleKeyState {
            height,
            next_leaf: 0,
            used_leaves: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        1u64 << self.height
    }

    pub fn remaining(&self) -> u64 {
        self.capacity() - self.next_leaf
    }
}

/// A key pair of any scheme. `public`/`private` hold the raw scheme material
/// (see module table); stateful schemes carry their consumption state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyPair {
    pub scheme: SchemeId,
    #[serde(with = "serde_hex::vec")]
    pub public: Vec<u8>,
    #[serde(with = "serde_hex::vec")]
    pub private: Vec<u8>,
    pub ots_state: Option<MerkleKeyState>,
    /// Rebuildable Merkle tree cache; never serialized, reconstructed from
    /// the seed on first use after a load.
    #[serde(skip)]
    tree_cache: Option<mss::MerkleTree>,
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.public == other.public
            && self.private == other.private
            && self.ots_state == other.ots_state
    }
}

impl KeyPair {
    pub fn public_key(&self) -> PublicKey {
        PublicKey {
            scheme: self.scheme,
            bytes: self.public.clone(),
        }
    }

    /// Signatures left before the key refuses. `None` means unlimited
    /// (classical).
    pub fn remaining_signatures(&self) -> Option<u64> {
        self.ots_state.as_ref().map(MerkleKeyState::remaining)
    }
}

/// A public key tagged with its scheme; hashing its canonical encoding under
/// the address domain yields the owner address used on tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: SchemeId,
    #[serde(with = "serde_hex::vec")]
    pub bytes: Vec<u8>,
}

impl PublicKey {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.bytes.len());
        out.push(self.scheme.code());
        out.extend(&self.bytes);
        out
    }

    pub fn decode(data: &[u8]) -> Result<PublicKey, CryptoError> {
        let (&code, rest) = data
            .split_first()
            .ok_or_else(|| CryptoError::MalformedSignature("empty public key".into()))?;
        let scheme = SchemeId::from_code(code).ok_or_else(|| {
            CryptoError::MalformedSignature(format!("unknown scheme code {code}"))
        })?;
        Ok(PublicKey {
            scheme,
            bytes: rest.to_vec(),
        })
    }

    /// The owner address: H("addr", scheme byte || key bytes). Addresses are
    /// what the register stores; raw keys only surface when spending.
    pub fn addr(&self) -> [u8; DIGEST_LEN] {
        hash::digest_parts(DomainTag::Addr, &[&self.encode()])
    }
}

/// A signature tagged with its scheme. `payload` is raw scheme material; the
/// Merkle leaf index is carried alongside and folded into the canonical
/// encoding right after the scheme byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub scheme: SchemeId,
    #[serde(with = "serde_hex::vec")]
    pub payload: Vec<u8>,
    pub leaf_index: Option<u32>,
}

impl Signature {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.push(self.scheme.code());
        if self.scheme == SchemeId::PqMss {
            out.extend(self.leaf_index.unwrap_or(0).to_be_bytes());
        }
        out.extend(&self.payload);
        out
    }

    pub fn decode(data: &[u8]) -> Result<Signature, CryptoError> {
        let (&code, rest) = data
            .split_first()
            .ok_or_else(|| CryptoError::MalformedSignature("empty signature".into()))?;
        let scheme = SchemeId::from_code(code).ok_or_else(|| {
            CryptoError::MalformedSignature(format!("unknown scheme code {code}"))
        })?;
        if scheme == SchemeId::PqMss {
            if rest.len() < 4 {
                return Err(CryptoError::MalformedSignature(
                    "mss signature shorter than its leaf index".into(),
                ));
            }
            let leaf = u32::from_be_bytes(rest[..4].try_into().unwrap());
            Ok(Signature {
                scheme,
                payload: rest[4..].to_vec(),
                leaf_index: Some(leaf),
            })
        } else {
            Ok(Signature {
                scheme,
                payload: rest.to_vec(),
                leaf_index: None,
            })
        }
    }
}

/// Byte counts for one scheme under one config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub scheme: SchemeId,
    pub public_bytes: usize,
    pub private_bytes: usize,
    pub signature_bytes: usize,
}

/// Generate a key pair. Hybrid has no single key pair; generate the two
/// components separately and compose at signing time.
pub fn keygen(
    cfg: &SchemeConfig,
    scheme: SchemeId,
    rng: &mut Drbg,
) -> Result<KeyPair, CryptoError> {
    keygen_with_height(cfg, scheme, cfg.mss_height, rng)
}

/// Like [`keygen`] but with an explicit Merkle height, for callers whose
/// key roles need different capacities than the config default.
pub fn keygen_with_height(
    cfg: &SchemeConfig,
    scheme: SchemeId,
    mss_height: u32,
    rng: &mut Drbg,
) -> Result<KeyPair, CryptoError> {
    match scheme {
        SchemeId::ClassicalSchnorr => {
            let (public, private) = schnorr::keygen(&cfg.group, rng);
            Ok(KeyPair {
                scheme,
                public,
                private,
                ots_state: None,
                tree_cache: None,
            })
        }
        SchemeId::PqWots => {
            let (public, private) = wots::keygen(rng);
            Ok(KeyPair {
                scheme,
                public,
                private,
                ots_state: Some(MerkleKeyState::new(0)),
                tree_cache: None,
            })
        }
        SchemeId::PqMss => {
            if !(mss::MIN_HEIGHT..=mss::MAX_HEIGHT).contains(&mss_height) {
                return Err(CryptoError::UnsupportedHeight(mss_height));
            }
            let (public, private, tree) = mss::keygen(mss_height, rng);
            Ok(KeyPair {
                scheme,
                public,
                private,
                ots_state: Some(MerkleKeyState::new(mss_height)),
                tree_cache: Some(tree),
            })
        }
        SchemeId::HybridCm => Err(CryptoError::WrongScheme(
            "hybrid-cm is a composite; generate a classical and a pq key pair".into(),
        )),
    }
}

/// Sign a message, consuming a leaf for the stateful schemes.
pub fn sign(cfg: &SchemeConfig, key: &mut KeyPair, msg: &[u8]) -> Result<Signature, CryptoError> {
    match key.scheme {
        SchemeId::ClassicalSchnorr => Ok(Signature {
            scheme: key.scheme,
            payload: schnorr::sign(&cfg.group, &key.private, msg),
            leaf_index: None,
        }),
        SchemeId::PqWots => {
            let state = key.ots_state.as_mut().expect("wots key carries state");
            if state.next_leaf >= 1 {
                return Err(CryptoError::OtsReuse);
            }
            let payload = wots::sign(&key.private, msg);
            state.next_leaf = 1;
            state.used_leaves.insert(0);
            Ok(Signature {
                scheme: key.scheme,
                payload,
                leaf_index: None,
            })
        }
        SchemeId::PqMss => {
            let state = key.ots_state.as_mut().expect("mss key carries state");
            if state.next_leaf >= state.capacity() {
                return Err(CryptoError::MssExhausted);
            }
            let leaf = state.next_leaf;
            if key.tree_cache.is_none() {
                key.tree_cache = Some(mss::build_tree(&key.private, state.height));
            }
            let tree = key.tree_cache.as_ref().unwrap();
            let payload = mss::sign(&key.private, tree, leaf, msg);
            let state = key.ots_state.as_mut().unwrap();
            state.next_leaf += 1;
            state.used_leaves.insert(leaf);
            Ok(Signature {
                scheme: key.scheme,
                payload,
                leaf_index: Some(leaf as u32),
            })
        }
        SchemeId::HybridCm => Err(CryptoError::WrongScheme(
            "use hybrid_sign for composite signatures".into(),
        )),
    }
}

/// Verify a signature against raw public key material of the same scheme.
///
/// Structural defects (wrong framing, truncation, scheme mismatch) error
/// with MALFORMED_SIGNATURE; a well-formed signature that simply does not
/// check out returns Ok(false).
pub fn verify(
    cfg: &SchemeConfig,
    public: &[u8],
    scheme: SchemeId,
    msg: &[u8],
    sig: &Signature,
) -> Result<bool, CryptoError> {
    if sig.scheme != scheme {
        return Err(CryptoError::MalformedSignature(format!(
            "signature scheme {} does not match expected {}",
            sig.scheme.name(),
            scheme.name()
        )));
    }
    match scheme {
        SchemeId::ClassicalSchnorr => {
            if sig.payload.len() != schnorr::signature_len(&cfg.group) {
                return Err(CryptoError::MalformedSignature(format!(
                    "schnorr signature must be {} bytes, got {}",
                    schnorr::signature_len(&cfg.group),
                    sig.payload.len()
                )));
            }
            Ok(schnorr::verify(&cfg.group, public, msg, &sig.payload))
        }
        SchemeId::PqWots => {
            if sig.payload.len() != wots::KEY_LEN {
                return Err(CryptoError::MalformedSignature(format!(
                    "wots signature must be {} bytes, got {}",
                    wots::KEY_LEN,
                    sig.payload.len()
                )));
            }
            Ok(wots::verify(public, msg, &sig.payload))
        }
        SchemeId::PqMss => {
            let leaf = sig.leaf_index.ok_or_else(|| {
                CryptoError::MalformedSignature("mss signature without leaf index".into())
            })?;
            mss::verify(public, msg, leaf as u64, &sig.payload).ok_or_else(|| {
                CryptoError::MalformedSignature("mss signature framing invalid".into())
            })
        }
        SchemeId::HybridCm => Err(CryptoError::WrongScheme(
            "use hybrid_verify for composite signatures".into(),
        )),
    }
}

/// Compose a classical and a PQ signature over the same message. The payload
/// is two length-framed canonical signatures, classical first.
pub fn hybrid_sign(
    cfg: &SchemeConfig,
    classical: &mut KeyPair,
    pq: &mut KeyPair,
    msg: &[u8],
) -> Result<Signature, CryptoError> {
    if classical.scheme != SchemeId::ClassicalSchnorr {
        return Err(CryptoError::WrongScheme(
            "hybrid first component must be classical-schnorr".into(),
        ));
    }
    if !pq.scheme.is_post_quantum() {
        return Err(CryptoError::WrongScheme(
            "hybrid second component must be a pq scheme".into(),
        ));
    }
    let c = sign(cfg, classical, msg)?.encode();
    let p = sign(cfg, pq, msg)?.encode();
    let mut payload = Vec::with_capacity(4 + c.len() + p.len());
    payload.extend((c.len() as u16).to_be_bytes());
    payload.extend(&c);
    payload.extend((p.len() as u16).to_be_bytes());
    payload.extend(&p);
    Ok(Signature {
        scheme: SchemeId::HybridCm,
        payload,
        leaf_index: None,
    })
}

/// Split a composite payload into its classical and PQ component signatures.
pub fn hybrid_components(sig: &Signature) -> Result<(Signature, Signature), CryptoError> {
    if sig.scheme != SchemeId::HybridCm {
        return Err(CryptoError::WrongScheme("not a hybrid signature".into()));
    }
    let data = &sig.payload;
    let take = |data: &[u8]| -> Result<(Signature, usize), CryptoError> {
        if data.len() < 2 {
            return Err(CryptoError::MalformedSignature(
                "hybrid frame truncated".into(),
            ));
        }
        let len = u16::from_be_bytes([data[0], data[1]]) as usize;
        if data.len() < 2 + len {
            return Err(CryptoError::MalformedSignature(
                "hybrid frame truncated".into(),
            ));
        }
        Ok((Signature::decode(&data[2..2 + len])?, 2 + len))
    };
    let (classical, used) = take(data)?;
    let (pq, used2) = take(&data[used..])?;
    if used + used2 != data.len() {
        return Err(CryptoError::MalformedSignature(
            "hybrid payload has trailing bytes".into(),
        ));
    }
    if classical.scheme != SchemeId::ClassicalSchnorr || !pq.scheme.is_post_quantum() {
        return Err(CryptoError::MalformedSignature(
            "hybrid components out of order".into(),
        ));
    }
    Ok((classical, pq))
}

/// Verify a composite signature under a policy. Both components must be
/// structurally present and well-formed regardless of policy; the policy
/// only chooses which of them must actually validate.
pub fn hybrid_verify(
    cfg: &SchemeConfig,
    classical_public: &[u8],
    pq_public: &PublicKey,
    msg: &[u8],
    sig: &Signature,
    policy: VerificationPolicy,
) -> Result<bool, CryptoError> {
    let (c_sig, p_sig) = hybrid_components(sig)?;
    if p_sig.scheme != pq_public.scheme {
        return Err(CryptoError::MalformedSignature(format!(
            "pq component is {} but key is {}",
            p_sig.scheme.name(),
            pq_public.scheme.name()
        )));
    }
    let classical_ok = match policy {
        VerificationPolicy::PqOnly => false,
        _ => verify(
            cfg,
            classical_public,
            SchemeId::ClassicalSchnorr,
            msg,
            &c_sig,
        )?,
    };
    let pq_ok = match policy {
        VerificationPolicy::ClassicalOnly => false,
        VerificationPolicy::Either if classical_ok => true,
        _ => verify(cfg, &pq_public.bytes, pq_public.scheme, msg, &p_sig)?,
    };
    Ok(policy.combine(classical_ok, pq_ok))
}

/// Report raw key and signature sizes for a scheme under a config.
pub fn scheme_sizes(cfg: &SchemeConfig, scheme: SchemeId) -> Result<SizeReport, CryptoError> {
    scheme_sizes_with_height(cfg, scheme, cfg.mss_height)
}

pub fn scheme_sizes_with_height(
    cfg: &SchemeConfig,
    scheme: SchemeId,
    mss_height: u32,
) -> Result<SizeReport, CryptoError> {
    match scheme {
        SchemeId::ClassicalSchnorr => Ok(SizeReport {
            scheme,
            public_bytes: cfg.group.p_len(),
            private_bytes: cfg.group.q_len(),
            signature_bytes: schnorr::signature_len(&cfg.group),
        }),
        SchemeId::PqWots => Ok(SizeReport {
            scheme,
            public_bytes: wots::KEY_LEN,
            private_bytes: wots::KEY_LEN,
            signature_bytes: wots::KEY_LEN,
        }),
        SchemeId::PqMss => {
            if !(mss::MIN_HEIGHT..=mss::MAX_HEIGHT).contains(&mss_height) {
                return Err(CryptoError::UnsupportedHeight(mss_height));
            }
            Ok(SizeReport {
                scheme,
                public_bytes: DIGEST_LEN,
                private_bytes: 32,
                signature_bytes: 4 + mss::payload_len(mss_height),
            })
        }
        SchemeId::HybridCm => {
            let classical = scheme_sizes(cfg, SchemeId::ClassicalSchnorr)?;
            let pq = scheme_sizes_with_height(cfg, cfg.hybrid_pq, mss_height)?;
            // Components travel as whole canonical encodings (scheme byte
            // included) behind 2-byte length frames.
            let frame = |inner: usize| 2 + 1 + inner;
            Ok(SizeReport {
                scheme,
                public_bytes: frame(classical.public_bytes) + frame(pq.public_bytes),
                private_bytes: frame(classical.private_bytes) + frame(pq.private_bytes),
                signature_bytes: frame(classical.signature_bytes) + frame(pq.signature_bytes),
            })
        }
    }
}
