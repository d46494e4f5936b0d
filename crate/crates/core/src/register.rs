//! The central bank register: the single authoritative ledger.
//!
//! Tokens are UTxO-style records: spending consumes inputs entirely and
//! mints fresh outputs, so the register only ever needs a live map and a
//! spent set to answer double-spend questions. Every validated operation
//! appends a structured event, signs a receipt with the register's Merkle
//! key, and records each revealed owner public key: the raw material for
//! the quantum attacker model upstream.
//!
//! Validation is all-or-nothing: every check runs before the first mutation,
//! so a rejected request leaves the state byte-identical.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, hash::digest_parts, serde_hex, CryptoError, DomainTag, Drbg, KeyPair, PublicKey,
    SchemeConfig, SchemeId, Signature, DIGEST_LEN,
};
use crate::Tick;

pub type TokenId = [u8; 16];
pub type Addr = [u8; DIGEST_LEN];

/// Token format version: 1 = classical ownership keys, 2 = post-quantum.
pub type Version = u16;
pub const V1: Version = 1;
pub const V2: Version = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegisterError {
    #[error("UNSUPPORTED_VERSION: version {version} not accepted at tick {now}")]
    UnsupportedVersion { version: Version, now: Tick },
    #[error("DOUBLE_SPEND: token {} already consumed", hex::encode(.0))]
    DoubleSpend(TokenId),
    #[error("UNKNOWN_TOKEN: {} was never minted", hex::encode(.0))]
    UnknownToken(TokenId),
    #[error("OWNER_MISMATCH: public key does not hash to the token's owner address")]
    OwnerMismatch(TokenId),
    #[error("BAD_SIGNATURE: input {} not authorized", hex::encode(.0))]
    BadSignature(TokenId),
    #[error("TOKEN_VERSION_EXPIRED: version {version} input no longer accepted at tick {now}")]
    TokenVersionExpired { version: Version, now: Tick },
    #[error("VALUE_MISMATCH: inputs total {input_total}, outputs total {output_total}")]
    ValueMismatch { input_total: u64, output_total: u64 },
    #[error("VERSION_DOWNGRADE_FORBIDDEN: output v{output} below input v{input}")]
    VersionDowngradeForbidden { input: Version, output: Version },
    #[error("DEADLINE_ORDER: require v2_activation {0} <= soft {1} <= hard {2}")]
    DeadlineOrder(Tick, Tick, Tick),
    #[error(
        "BEFORE_DEADLINE: stranded value is defined only after the hard deadline ({0} <= {1})"
    )]
    BeforeDeadline(Tick, Tick),
    #[error("MALFORMED_REQUEST: {0}")]
    MalformedRequest(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl RegisterError {
    pub fn code(&self) -> &'static str {
        match self {
            RegisterError::UnsupportedVersion { .. } => "UNSUPPORTED_VERSION",
            RegisterError::DoubleSpend(_) => "DOUBLE_SPEND",
            RegisterError::UnknownToken(_) => "UNKNOWN_TOKEN",
            RegisterError::OwnerMismatch(_) => "OWNER_MISMATCH",
            RegisterError::BadSignature(_) => "BAD_SIGNATURE",
            RegisterError::TokenVersionExpired { .. } => "TOKEN_VERSION_EXPIRED",
            RegisterError::ValueMismatch { .. } => "VALUE_MISMATCH",
            RegisterError::VersionDowngradeForbidden { .. } => "VERSION_DOWNGRADE_FORBIDDEN",
            RegisterError::DeadlineOrder(..) => "DEADLINE_ORDER",
            RegisterError::BeforeDeadline(..) => "BEFORE_DEADLINE",
            RegisterError::MalformedRequest(_) => "MALFORMED_REQUEST",
            RegisterError::Crypto(e) => e.code(),
        }
    }
}

/// Does this ownership key family match the token version it claims to spend?
pub fn scheme_matches_version(version: Version, scheme: SchemeId) -> bool {
    match version {
        V1 => scheme == SchemeId::ClassicalSchnorr,
        V2 => scheme.is_post_quantum(),
        _ => false,
    }
}

/// A value-bearing record. The owner is identified only by a hash of their
/// public key; the key itself stays private until the token is spent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    #[serde(with = "serde_hex::arr16")]
    pub token_id: TokenId,
    pub version: Version,
    /// Integer minor units (cents at the default `value_scale` of 2).
    pub value: u64,
    #[serde(with = "serde_hex::arr32")]
    pub owner_addr: Addr,
    /// Register signature over the token's canonical bytes. `None` only for
    /// provisional tokens created wallet-side during offline payment chains,
    /// before the register has validated the transfer that mints them.
    pub mint_sig: Option<Signature>,
}

impl Token {
    /// Canonical digest the register signs when (re)minting this token.
    pub fn signing_digest(&self) -> [u8; DIGEST_LEN] {
        digest_parts(
            DomainTag::Tx,
            &[
                b"token",
                &self.token_id,
                &self.value.to_be_bytes(),
                &self.owner_addr,
                &self.version.to_be_bytes(),
            ],
        )
    }
}

/// One spend authorization: which token, the until-now hidden public key,
/// and a signature over the whole request's canonical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferInput {
    #[serde(with = "serde_hex::arr16")]
    pub token_id: TokenId,
    pub owner_pub: PublicKey,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferOutput {
    pub value: u64,
    #[serde(with = "serde_hex::arr32")]
    pub owner_addr: Addr,
    pub version: Version,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub inputs: Vec<TransferInput>,
    pub outputs: Vec<TransferOutput>,
}

impl TransferRequest {
    /// The bytes every input owner signs: all inputs (ids and keys, not
    /// signatures) and all outputs, length-prefixed in a fixed order. Each
    /// owner signs the same bytes, so co-signing never reveals extra
    /// one-time-key material.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.inputs.len() as u16).to_be_bytes());
        for input in &self.inputs {
            out.extend(input.token_id);
            let pk = input.owner_pub.encode();
            out.extend((pk.len() as u16).to_be_bytes());
            out.extend(pk);
        }
        out.extend((self.outputs.len() as u16).to_be_bytes());
        for output in &self.outputs {
            out.extend(output.value.to_be_bytes());
            out.extend(output.owner_addr);
            out.extend(output.version.to_be_bytes());
        }
        out
    }

    /// Transfer digest: names the transfer in receipts and derives output
    /// token ids, so both are fixed the moment the request is signed, even
    /// for transfers that settle long after being built offline.
    pub fn digest(&self) -> [u8; DIGEST_LEN] {
        digest_parts(DomainTag::Tx, &[b"transfer", &self.signing_bytes()])
    }

    /// The token id the i-th output will get if this request validates.
    pub fn output_token_id(&self, index: usize) -> TokenId {
        derive_output_id(&self.digest(), index)
    }
}

pub fn derive_output_id(transfer_digest: &[u8; DIGEST_LEN], index: usize) -> TokenId {
    let digest = digest_parts(
        DomainTag::Tx,
        &[b"output", transfer_digest, &(index as u16).to_be_bytes()],
    );
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    id
}

/// Register acknowledgment of a validated transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    #[serde(with = "serde_hex::arr32")]
    pub transfer_digest: [u8; DIGEST_LEN],
    pub new_token_ids: Vec<TokenIdHex>,
    pub tick: Tick,
    pub register_sig: Signature,
}

/// TokenId wrapper so lists of ids serialize as hex strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIdHex(#[serde(with = "serde_hex::arr16")] pub TokenId);

impl Receipt {
    pub fn signing_digest(
        transfer_digest: &[u8; DIGEST_LEN],
        new_token_ids: &[TokenIdHex],
        tick: Tick,
    ) -> [u8; DIGEST_LEN] {
        let mut parts: Vec<&[u8]> = vec![b"receipt", transfer_digest];
        for id in new_token_ids {
            parts.push(&id.0);
        }
        let tick_bytes = tick.to_be_bytes();
        parts.push(&tick_bytes);
        digest_parts(DomainTag::Receipt, &parts)
    }
}

/// Check a receipt against the register's public key.
pub fn verify_receipt(cfg: &SchemeConfig, receipt: &Receipt, register_pub: &PublicKey) -> bool {
    let digest = Receipt::signing_digest(
        &receipt.transfer_digest,
        &receipt.new_token_ids,
        receipt.tick,
    );
    crypto::verify(
        cfg,
        &register_pub.bytes,
        register_pub.scheme,
        &digest,
        &receipt.register_sig,
    )
    .unwrap_or(false)
}

/// Check a token's mint signature against the register's public key.
pub fn verify_token_mint(cfg: &SchemeConfig, token: &Token, register_pub: &PublicKey) -> bool {
    match &token.mint_sig {
        None => false,
        Some(sig) => crypto::verify(
            cfg,
            &register_pub.bytes,
            register_pub.scheme,
            &token.signing_digest(),
            sig,
        )
        .unwrap_or(false),
    }
}

/// Minimal token facts carried by ledger events: enough to rebuild all
/// balances from the log alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOutline {
    #[serde(with = "serde_hex::arr16")]
    pub token_id: TokenId,
    pub value: u64,
    pub version: Version,
    #[serde(with = "serde_hex::arr32")]
    pub owner_addr: Addr,
}

impl TokenOutline {
    fn of(token: &Token) -> TokenOutline {
        TokenOutline {
            token_id: token.token_id,
            value: token.value,
            version: token.version,
            owner_addr: token.owner_addr,
        }
    }
}

/// One line of the append-only ledger log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LedgerEvent {
    Mint {
        token: TokenOutline,
        tick: Tick,
    },
    Transfer {
        #[serde(with = "serde_hex::arr32")]
        digest: [u8; DIGEST_LEN],
        inputs: Vec<TokenIdHex>,
        outputs: Vec<TokenOutline>,
        tick: Tick,
    },
    Convert {
        #[serde(with = "serde_hex::arr32")]
        digest: [u8; DIGEST_LEN],
        input: TokenIdHex,
        output: TokenOutline,
        from_version: Version,
        to_version: Version,
        tick: Tick,
    },
}

/// A revealed owner key: the quantum attack surface. Appended the moment a
/// transfer validates, because spending is what puts the key on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealEntry {
    pub public_key: PublicKey,
    pub tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterConfig {
    pub scheme: SchemeConfig,
    /// Height of the register's receipt/mint signing tree. Every validated
    /// transfer consumes one leaf per output plus one for the receipt, so
    /// size this to the expected event volume.
    pub receipt_tree_height: u32,
    /// Decimal digits of value resolution (2 = cents). Metadata for display
    /// and report headers; all arithmetic stays integral.
    pub value_scale: u8,
    pub downgrade_allowed: bool,
    pub v2_activation: Tick,
    pub soft_deadline: Tick,
    pub hard_deadline: Tick,
}

impl Default for RegisterConfig {
    fn default() -> RegisterConfig {
        RegisterConfig {
            scheme: SchemeConfig::default(),
            receipt_tree_height: 16,
            value_scale: 2,
            downgrade_allowed: false,
            v2_activation: 100,
            soft_deadline: 500,
            hard_deadline: 1000,
        }
    }
}

mod serde_token_map {
    use super::{Token, TokenId};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<TokenId, Token>, s: S) -> Result<S::Ok, S::Error> {
        m.values().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<TokenId, Token>, D::Error> {
        let tokens = Vec::<Token>::deserialize(d)?;
        Ok(tokens.into_iter().map(|t| (t.token_id, t)).collect())
    }
}

mod serde_id_set {
    use super::TokenId;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeSet;

    pub fn serialize<S: Serializer>(set: &BTreeSet<TokenId>, s: S) -> Result<S::Ok, S::Error> {
        set.iter().map(hex::encode).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<TokenId>, D::Error> {
        let strings = Vec::<String>::deserialize(d)?;
        strings
            .into_iter()
            .map(|h| {
                let bytes = hex::decode(&h).map_err(serde::de::Error::custom)?;
                let arr: TokenId = bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| serde::de::Error::custom("token id must be 16 bytes"))?;
                Ok(arr)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterState {
    pub config: RegisterConfig,
    #[serde(with = "serde_token_map")]
    pub live: BTreeMap<TokenId, Token>,
    #[serde(with = "serde_id_set")]
    pub spent: BTreeSet<TokenId>,
    pub clock: Tick,
    pub register_key: KeyPair,
    pub reveal_log: Vec<RevealEntry>,
    pub events: Vec<LedgerEvent>,
    mint_counter: u64,
    pub total_minted: u64,
}

enum SettleKind {
    Transfer,
    Convert,
}

impl RegisterState {
    pub fn new(config: RegisterConfig, rng: &mut Drbg) -> Result<RegisterState, RegisterError> {
        if !(config.v2_activation <= config.soft_deadline
            && config.soft_deadline <= config.hard_deadline)
        {
            return Err(RegisterError::DeadlineOrder(
                config.v2_activation,
                config.soft_deadline,
                config.hard_deadline,
            ));
        }
        let register_key = crypto::keygen_with_height(
            &config.scheme,
            SchemeId::PqMss,
            config.receipt_tree_height,
            rng,
        )?;
        Ok(RegisterState {
            config,
            live: BTreeMap::new(),
            spent: BTreeSet::new(),
            clock: 0,
            register_key,
            reveal_log: Vec::new(),
            events: Vec::new(),
            mint_counter: 0,
            total_minted: 0,
        })
    }

    pub fn register_public(&self) -> PublicKey {
        self.register_key.public_key()
    }

    /// Token versions accepted at `now`: {1} before v2 activation, {1,2}
    /// through the hard deadline, {2} strictly after it.
    pub fn supported_versions_at(&self, now: Tick) -> BTreeSet<Version> {
        if now < self.config.v2_activation {
            BTreeSet::from([V1])
        } else if now <= self.config.hard_deadline {
            BTreeSet::from([V1, V2])
        } else {
            BTreeSet::from([V2])
        }
    }

    pub fn supported_versions(&self) -> BTreeSet<Version> {
        self.supported_versions_at(self.clock)
    }

    pub fn advance_clock(&mut self, now: Tick) {
        if now > self.clock {
            self.clock = now;
        }
    }

    /// Reconfigure the migration timeline.
    pub fn set_migration(
        &mut self,
        v2_activation: Tick,
        soft_deadline: Tick,
        hard_deadline: Tick,
        downgrade_allowed: bool,
    ) -> Result<(), RegisterError> {
        if !(v2_activation <= soft_deadline && soft_deadline <= hard_deadline) {
            return Err(RegisterError::DeadlineOrder(
                v2_activation,
                soft_deadline,
                hard_deadline,
            ));
        }
        self.config.v2_activation = v2_activation;
        self.config.soft_deadline = soft_deadline;
        self.config.hard_deadline = hard_deadline;
        self.config.downgrade_allowed = downgrade_allowed;
        Ok(())
    }

    /// Create new money. Only minting (not transfers) changes total value.
    pub fn mint(
        &mut self,
        value: u64,
        owner_addr: Addr,
        version: Version,
    ) -> Result<Token, RegisterError> {
        if value == 0 {
            return Err(RegisterError::MalformedRequest(
                "token value must be at least 1".into(),
            ));
        }
        if !self.supported_versions().contains(&version) {
            return Err(RegisterError::UnsupportedVersion {
                version,
                now: self.clock,
            });
        }
        let digest = digest_parts(
            DomainTag::Tx,
            &[
                b"mint",
                &self.mint_counter.to_be_bytes(),
                &owner_addr,
                &value.to_be_bytes(),
            ],
        );
        let mut token_id = [0u8; 16];
        token_id.copy_from_slice(&digest[..16]);
        let mut token = Token {
            token_id,
            version,
            value,
            owner_addr,
            mint_sig: None,
        };
        let sig = crypto::sign(
            &self.config.scheme,
            &mut self.register_key,
            &token.signing_digest(),
        )?;
        token.mint_sig = Some(sig);
        self.mint_counter += 1;
        self.total_minted += value;
        self.live.insert(token_id, token.clone());
        self.events.push(LedgerEvent::Mint {
            token: TokenOutline::of(&token),
            tick: self.clock,
        });
        Ok(token)
    }

    /// Validate and settle a transfer. Checks run in a fixed order and
    /// nothing mutates until all of them pass.
    pub fn validate_transfer(
        &mut self,
        req: &TransferRequest,
        now: Tick,
    ) -> Result<Receipt, RegisterError> {
        self.advance_clock(now);
        self.settle(req, SettleKind::Transfer)
    }

    fn settle(
        &mut self,
        req: &TransferRequest,
        kind: SettleKind,
    ) -> Result<Receipt, RegisterError> {
        let now = self.clock;
        if req.inputs.is_empty() {
            return Err(RegisterError::MalformedRequest(
                "a transfer needs at least one input".into(),
            ));
        }
        if req.outputs.is_empty() {
            return Err(RegisterError::MalformedRequest(
                "a transfer needs at least one output".into(),
            ));
        }
        if let Some(bad) = req.outputs.iter().find(|o| o.value == 0) {
            return Err(RegisterError::MalformedRequest(format!(
                "output to {} has zero value",
                hex::encode(bad.owner_addr)
            )));
        }

        let supported = self.supported_versions_at(now);
        let signing_bytes = req.signing_bytes();
        let mut seen = BTreeSet::new();
        let mut input_total: u64 = 0;
        let mut max_input_version = 0;
        for input in &req.inputs {
            if !seen.insert(input.token_id) {
                return Err(RegisterError::DoubleSpend(input.token_id));
            }
            let token = match self.live.get(&input.token_id) {
                Some(t) => t,
                None if self.spent.contains(&input.token_id) => {
                    return Err(RegisterError::DoubleSpend(input.token_id));
                }
                None => return Err(RegisterError::UnknownToken(input.token_id)),
            };
            if input.owner_pub.addr() != token.owner_addr {
                return Err(RegisterError::OwnerMismatch(input.token_id));
            }
            if !scheme_matches_version(token.version, input.owner_pub.scheme) {
                return Err(RegisterError::BadSignature(input.token_id));
            }
            if !supported.contains(&token.version) {
                return Err(RegisterError::TokenVersionExpired {
                    version: token.version,
                    now,
                });
            }
            let ok = crypto::verify(
                &self.config.scheme,
                &input.owner_pub.bytes,
                input.owner_pub.scheme,
                &signing_bytes,
                &input.signature,
            )
            .unwrap_or(false);
            if !ok {
                return Err(RegisterError::BadSignature(input.token_id));
            }
            input_total += token.value;
            max_input_version = max_input_version.max(token.version);
        }

        let output_total: u64 = req.outputs.iter().map(|o| o.value).sum();
        if input_total != output_total {
            return Err(RegisterError::ValueMismatch {
                input_total,
                output_total,
            });
        }
        for output in &req.outputs {
            if !supported.contains(&output.version) {
                return Err(RegisterError::UnsupportedVersion {
                    version: output.version,
                    now,
                });
            }
            if output.version < max_input_version && !self.config.downgrade_allowed {
                return Err(RegisterError::VersionDowngradeForbidden {
                    input: max_input_version,
                    output: output.version,
                });
            }
        }

        // All checks passed; from here on the transfer settles atomically.
        let digest = req.digest();
        let mut new_tokens = Vec::with_capacity(req.outputs.len());
        for (index, output) in req.outputs.iter().enumerate() {
            let token_id = derive_output_id(&digest, index);
            let mut token = Token {
                token_id,
                version: output.version,
                value: output.value,
                owner_addr: output.owner_addr,
                mint_sig: None,
            };
            let sig = crypto::sign(
                &self.config.scheme,
                &mut self.register_key,
                &token.signing_digest(),
            )?;
            token.mint_sig = Some(sig);
            new_tokens.push(token);
        }
        let input_ids: Vec<TokenIdHex> =
            req.inputs.iter().map(|i| TokenIdHex(i.token_id)).collect();
        let mut input_versions = Vec::with_capacity(req.inputs.len());
        for input in &req.inputs {
            let token = self
                .live
                .remove(&input.token_id)
                .expect("checked live above");
            input_versions.push(token.version);
            self.spent.insert(input.token_id);
        }
        let new_ids: Vec<TokenIdHex> = new_tokens.iter().map(|t| TokenIdHex(t.token_id)).collect();
        for token in &new_tokens {
            self.live.insert(token.token_id, token.clone());
        }
        for input in &req.inputs {
            self.reveal_log.push(RevealEntry {
                public_key: input.owner_pub.clone(),
                tick: now,
            });
        }
        match kind {
            SettleKind::Transfer => self.events.push(LedgerEvent::Transfer {
                digest,
                inputs: input_ids,
                outputs: new_tokens.iter().map(TokenOutline::of).collect(),
                tick: now,
            }),
            SettleKind::Convert => self.events.push(LedgerEvent::Convert {
                digest,
                input: input_ids[0],
                output: TokenOutline::of(&new_tokens[0]),
                from_version: input_versions[0],
                to_version: new_tokens[0].version,
                tick: now,
            }),
        }
        let receipt_digest = Receipt::signing_digest(&digest, &new_ids, now);
        let register_sig =
            crypto::sign(&self.config.scheme, &mut self.register_key, &receipt_digest)?;
        Ok(Receipt {
            transfer_digest: digest,
            new_token_ids: new_ids,
            tick: now,
            register_sig,
        })
    }

    /// Exchange one live token for an equal-value token of another version.
    /// This is exactly a 1-input/1-output transfer, so every transfer rule
    /// (ownership, deadlines, downgrade policy) applies unchanged.
    pub fn convert_version(
        &mut self,
        token_id: TokenId,
        owner_pub: PublicKey,
        signature: Signature,
        new_version: Version,
        new_owner_addr: Addr,
        now: Tick,
    ) -> Result<(Token, Receipt), RegisterError> {
        self.advance_clock(now);
        let value = match self.live.get(&token_id) {
            Some(t) => t.value,
            None if self.spent.contains(&token_id) => {
                return Err(RegisterError::DoubleSpend(token_id));
            }
            None => return Err(RegisterError::UnknownToken(token_id)),
        };
        let req = TransferRequest {
            inputs: vec![TransferInput {
                token_id,
                owner_pub,
                signature,
            }],
            outputs: vec![TransferOutput {
                value,
                owner_addr: new_owner_addr,
                version: new_version,
            }],
        };
        let receipt = self.settle(&req, SettleKind::Convert)?;
        let new_id = receipt.new_token_ids[0].0;
        let token = self
            .live
            .get(&new_id)
            .expect("conversion output is live")
            .clone();
        Ok((token, receipt))
    }

    /// Value that can never migrate: live v1 holdings after the register has
    /// stopped accepting v1 inputs.
    pub fn stranded_value(&self, now: Tick) -> Result<u64, RegisterError> {
        if now <= self.config.hard_deadline {
            return Err(RegisterError::BeforeDeadline(
                now,
                self.config.hard_deadline,
            ));
        }
        Ok(self
            .live
            .values()
            .filter(|t| t.version == V1)
            .map(|t| t.value)
            .sum())
    }

    pub fn live_value(&self) -> u64 {
        self.live.values().map(|t| t.value).sum()
    }

    pub fn live_value_by_version(&self) -> (u64, u64) {
        let mut v1 = 0;
        let mut v2 = 0;
        for t in self.live.values() {
            match t.version {
                V1 => v1 += t.value,
                _ => v2 += t.value,
            }
        }
        (v1, v2)
    }

    /// Total value currently held at one address.
    pub fn balance_of(&self, addr: &Addr) -> u64 {
        self.live
            .values()
            .filter(|t| &t.owner_addr == addr)
            .map(|t| t.value)
            .sum()
    }

    /// Rebuild balances purely from the event log and compare with the live
    /// state. Returns the mismatches (empty = consistent).
    pub fn audit(&self) -> Vec<String> {
        let (replayed_live, replayed_spent) = replay_events(&self.events);
        let mut problems = Vec::new();
        let state_live: BTreeMap<TokenId, TokenOutline> = self
            .live
            .values()
            .map(|t| (t.token_id, TokenOutline::of(t)))
            .collect();
        if state_live != replayed_live {
            problems.push(format!(
                "live set mismatch: state has {} tokens, replay has {}",
                state_live.len(),
                replayed_live.len()
            ));
        }
        if self.spent != replayed_spent {
            problems.push(format!(
                "spent set mismatch: state has {} ids, replay has {}",
                self.spent.len(),
                replayed_spent.len()
            ));
        }
        let replay_total: u64 = replayed_live.values().map(|t| t.value).sum();
        let minted: u64 = self
            .events
            .iter()
            .filter_map(|e| match e {
                LedgerEvent::Mint { token, .. } => Some(token.value),
                _ => None,
            })
            .sum();
        if replay_total != minted {
            problems.push(format!(
                "conservation breach in log: live {replay_total} != minted {minted}"
            ));
        }
        if minted != self.total_minted {
            problems.push(format!(
                "mint counter mismatch: log {minted} != state {}",
                self.total_minted
            ));
        }
        problems
    }
}

/// Fold an event log into (live outlines, spent ids) with no reference to
/// any register state.
pub fn replay_events(
    events: &[LedgerEvent],
) -> (BTreeMap<TokenId, TokenOutline>, BTreeSet<TokenId>) {
    let mut live: BTreeMap<TokenId, TokenOutline> = BTreeMap::new();
    let mut spent: BTreeSet<TokenId> = BTreeSet::new();
    for event in events {
        match event {
            LedgerEvent::Mint { token, .. } => {
                live.insert(token.token_id, token.clone());
            }
            LedgerEvent::Transfer {
                inputs, outputs, ..
            } => {
                for id in inputs {
                    live.remove(&id.0);
                    spent.insert(id.0);
                }
                for outline in outputs {
                    live.insert(outline.token_id, outline.clone());
                }
            }
            LedgerEvent::Convert { input, output, .. } => {
                live.remove(&input.0);
                spent.insert(input.0);
                live.insert(output.token_id, output.clone());
            }
        }
    }
    (live, spent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RegisterConfig {
        RegisterConfig {
            receipt_tree_height: 6,
            ..RegisterConfig::default()
        }
    }

    fn new_register(seed: u8) -> RegisterState {
        RegisterState::new(small_config(), &mut Drbg::new([seed; 32])).unwrap()
    }

    struct Owner {
        key: KeyPair,
    }

    impl Owner {
        fn classical(rng: &mut Drbg) -> Owner {
            let cfg = SchemeConfig::default();
            Owner {
                key: crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, rng).unwrap(),
            }
        }

        fn pq(rng: &mut Drbg) -> Owner {
            let cfg = SchemeConfig::default();
            Owner {
                key: crypto::keygen(&cfg, SchemeId::PqWots, rng).unwrap(),
            }
        }

        fn addr(&self) -> Addr {
            self.key.public_key().addr()
        }

        fn sign_input(&mut self, token_id: TokenId, req_bytes: &[u8]) -> TransferInput {
            let cfg = SchemeConfig::default();
            TransferInput {
                token_id,
                owner_pub: self.key.public_key(),
                signature: crypto::sign(&cfg, &mut self.key, req_bytes).unwrap(),
            }
        }
    }

    /// Build a fully signed request spending `token` to the given outputs.
    fn signed_transfer(
        owner: &mut Owner,
        token_id: TokenId,
        outputs: Vec<TransferOutput>,
    ) -> TransferRequest {
        let mut req = TransferRequest {
            inputs: vec![TransferInput {
                token_id,
                owner_pub: owner.key.public_key(),
                signature: Signature {
                    scheme: owner.key.scheme,
                    payload: Vec::new(),
                    leaf_index: None,
                },
            }],
            outputs,
        };
        let bytes = req.signing_bytes();
        req.inputs[0] = owner.sign_input(token_id, &bytes);
        req
    }

    #[test]
    fn mint_respects_version_schedule() {
        let mut reg = new_register(30);
        let mut rng = Drbg::new([31u8; 32]);
        let owner = Owner::classical(&mut rng);
        // Before activation only v1 exists.
        let token = reg.mint(1000, owner.addr(), V1).unwrap();
        assert_eq!(token.value, 1000);
        assert!(reg.live.contains_key(&token.token_id));
        assert!(verify_token_mint(
            &reg.config.scheme.clone(),
            &token,
            &reg.register_public()
        ));
        let err = reg.mint(1000, owner.addr(), V2).unwrap_err();
        assert_eq!(err.code(), "UNSUPPORTED_VERSION");
        // After the hard deadline v1 can no longer be created.
        reg.advance_clock(1001);
        let err = reg.mint(1000, owner.addr(), V1).unwrap_err();
        assert_eq!(err.code(), "UNSUPPORTED_VERSION");
        assert!(reg.mint(1000, owner.addr(), V2).is_ok());
    }

    #[test]
    fn supported_versions_timeline() {
        let reg = new_register(32);
        assert_eq!(reg.supported_versions_at(99), BTreeSet::from([V1]));
        assert_eq!(reg.supported_versions_at(100), BTreeSet::from([V1, V2]));
        assert_eq!(reg.supported_versions_at(500), BTreeSet::from([V1, V2]));
        assert_eq!(reg.supported_versions_at(1000), BTreeSet::from([V1, V2]));
        assert_eq!(reg.supported_versions_at(1001), BTreeSet::from([V2]));
    }

    #[test]
    fn transfer_with_change_spends_whole_token() {
        let mut reg = new_register(33);
        let mut rng = Drbg::new([34u8; 32]);
        let mut alice = Owner::classical(&mut rng);
        let bob = Owner::classical(&mut rng);
        let alice_change = Owner::classical(&mut rng);
        let token = reg.mint(1000, alice.addr(), V1).unwrap();
        // 10.00 in, 2.00 to the payee, 8.00 change to a fresh address.
        let req = signed_transfer(
            &mut alice,
            token.token_id,
            vec![
                TransferOutput {
                    value: 200,
                    owner_addr: bob.addr(),
                    version: V1,
                },
                TransferOutput {
                    value: 800,
                    owner_addr: alice_change.addr(),
                    version: V1,
                },
            ],
        );
        let receipt = reg.validate_transfer(&req, 5).unwrap();
        assert_eq!(receipt.new_token_ids.len(), 2);
        assert!(verify_receipt(
            &reg.config.scheme.clone(),
            &receipt,
            &reg.register_public()
        ));
        assert!(!reg.live.contains_key(&token.token_id));
        assert!(reg.spent.contains(&token.token_id));
        for (id, want_value) in receipt.new_token_ids.iter().zip([200u64, 800]) {
            let t = &reg.live[&id.0];
            assert_eq!(t.value, want_value);
            assert!(verify_token_mint(
                &reg.config.scheme.clone(),
                t,
                &reg.register_public()
            ));
        }
        // The ids were derivable client-side before submission.
        assert_eq!(receipt.new_token_ids[0].0, req.output_token_id(0));
        // The revealed key is now on the record.
        assert_eq!(reg.reveal_log.len(), 1);
        assert_eq!(reg.reveal_log[0].public_key, alice.key.public_key());
        assert_eq!(reg.reveal_log[0].tick, 5);
        // Replay of the same request is a double spend.
        let err = reg.validate_transfer(&req, 6).unwrap_err();
        assert_eq!(err.code(), "DOUBLE_SPEND");
    }

    #[test]
    fn rejects_are_fully_diagnosed() {
        let mut reg = new_register(35);
        let mut rng = Drbg::new([36u8; 32]);
        let mut alice = Owner::classical(&mut rng);
        let mut mallory = Owner::classical(&mut rng);
        let bob = Owner::classical(&mut rng);
        let token = reg.mint(500, alice.addr(), V1).unwrap();

        // Unknown token id.
        let req = signed_transfer(
            &mut alice,
            [9u8; 16],
            vec![TransferOutput {
                value: 500,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        assert_eq!(
            reg.validate_transfer(&req, 1).unwrap_err().code(),
            "UNKNOWN_TOKEN"
        );

        // Wrong owner key.
        let req = signed_transfer(
            &mut mallory,
            token.token_id,
            vec![TransferOutput {
                value: 500,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        assert_eq!(
            reg.validate_transfer(&req, 1).unwrap_err().code(),
            "OWNER_MISMATCH"
        );

        // Right key, corrupted signature.
        let mut req = signed_transfer(
            &mut Owner {
                key: alice.key.clone(),
            },
            token.token_id,
            vec![TransferOutput {
                value: 500,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        req.inputs[0].signature.payload[0] ^= 1;
        assert_eq!(
            reg.validate_transfer(&req, 1).unwrap_err().code(),
            "BAD_SIGNATURE"
        );

        // Value imbalance.
        let req = signed_transfer(
            &mut Owner {
                key: alice.key.clone(),
            },
            token.token_id,
            vec![TransferOutput {
                value: 499,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        assert_eq!(
            reg.validate_transfer(&req, 1).unwrap_err().code(),
            "VALUE_MISMATCH"
        );

        // Duplicate input in one request.
        let outputs = vec![TransferOutput {
            value: 1000,
            owner_addr: bob.addr(),
            version: V1,
        }];
        let mut req = TransferRequest {
            inputs: vec![
                TransferInput {
                    token_id: token.token_id,
                    owner_pub: alice.key.public_key(),
                    signature: Signature {
                        scheme: SchemeId::ClassicalSchnorr,
                        payload: Vec::new(),
                        leaf_index: None,
                    },
                },
                TransferInput {
                    token_id: token.token_id,
                    owner_pub: alice.key.public_key(),
                    signature: Signature {
                        scheme: SchemeId::ClassicalSchnorr,
                        payload: Vec::new(),
                        leaf_index: None,
                    },
                },
            ],
            outputs,
        };
        let bytes = req.signing_bytes();
        let signed = alice.sign_input(token.token_id, &bytes);
        req.inputs[0] = signed.clone();
        req.inputs[1] = signed;
        assert_eq!(
            reg.validate_transfer(&req, 1).unwrap_err().code(),
            "DOUBLE_SPEND"
        );

        // Nothing was consumed by any of the rejections.
        assert!(reg.live.contains_key(&token.token_id));
        assert!(reg.reveal_log.is_empty());
    }

    #[test]
    fn failed_transfer_leaves_state_byte_identical() {
        let mut reg = new_register(37);
        let mut rng = Drbg::new([38u8; 32]);
        let mut alice = Owner::classical(&mut rng);
        let bob = Owner::classical(&mut rng);
        let token = reg.mint(500, alice.addr(), V1).unwrap();
        let before = serde_json::to_string(&reg).unwrap();
        let req = signed_transfer(
            &mut alice,
            token.token_id,
            vec![TransferOutput {
                value: 123,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        // Fails at clock 0 because of the value mismatch; even the clock must
        // not move since validate_transfer(.., 0) is a no-op advance.
        assert!(reg.validate_transfer(&req, 0).is_err());
        let after = serde_json::to_string(&reg).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn version_rules_on_inputs_and_outputs() {
        let mut reg = new_register(39);
        let mut rng = Drbg::new([40u8; 32]);
        let alice = Owner::classical(&mut rng);
        let bob = Owner::classical(&mut rng);
        let pq_bob = Owner::pq(&mut rng);
        let token = reg.mint(300, alice.addr(), V1).unwrap();

        // v2 outputs are rejected before activation...
        let req = signed_transfer(
            &mut Owner {
                key: alice.key.clone(),
            },
            token.token_id,
            vec![TransferOutput {
                value: 300,
                owner_addr: pq_bob.addr(),
                version: V2,
            }],
        );
        assert_eq!(
            reg.validate_transfer(&req, 50).unwrap_err().code(),
            "UNSUPPORTED_VERSION"
        );
        // ...and accepted after it (an upgrade, not a downgrade).
        assert!(reg.validate_transfer(&req, 100).is_ok());

        // A v2 token cannot fund a v1 output unless downgrades are allowed.
        let pq_token = reg.live.values().find(|t| t.version == V2).unwrap().clone();
        let mut pq_owner = Owner {
            key: pq_bob.key.clone(),
        };
        let req = signed_transfer(
            &mut pq_owner,
            pq_token.token_id,
            vec![TransferOutput {
                value: 300,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        assert_eq!(
            reg.validate_transfer(&req, 101).unwrap_err().code(),
            "VERSION_DOWNGRADE_FORBIDDEN"
        );
        reg.config.downgrade_allowed = true;
        // The one-time key already signed this exact request, so the same
        // signature can be resubmitted unchanged.
        assert!(reg.validate_transfer(&req, 102).is_ok());
    }

    #[test]
    fn v1_inputs_expire_after_hard_deadline() {
        let mut reg = new_register(41);
        let mut rng = Drbg::new([42u8; 32]);
        let mut alice = Owner::classical(&mut rng);
        let bob = Owner::classical(&mut rng);
        let token = reg.mint(100, alice.addr(), V1).unwrap();
        let req = signed_transfer(
            &mut alice,
            token.token_id,
            vec![TransferOutput {
                value: 100,
                owner_addr: bob.addr(),
                version: V1,
            }],
        );
        let err = reg.validate_transfer(&req, 1001).unwrap_err();
        assert_eq!(err.code(), "TOKEN_VERSION_EXPIRED");
    }

    #[test]
    fn conversion_preserves_value_and_logs_its_own_event() {
        let mut reg = new_register(43);
        let mut rng = Drbg::new([44u8; 32]);
        let mut alice = Owner::classical(&mut rng);
        let alice_pq = Owner::pq(&mut rng);
        let token = reg.mint(750, alice.addr(), V1).unwrap();
        reg.advance_clock(600);

        // Sign the implied 1-in/1-out request.
        let req = TransferRequest {
            inputs: vec![TransferInput {
                token_id: token.token_id,
                owner_pub: alice.key.public_key(),
                signature: Signature {
                    scheme: SchemeId::ClassicalSchnorr,
                    payload: Vec::new(),
                    leaf_index: None,
                },
            }],
            outputs: vec![TransferOutput {
                value: 750,
                owner_addr: alice_pq.addr(),
                version: V2,
            }],
        };
        let bytes = req.signing_bytes();
        let cfg = SchemeConfig::default();
        let sig = crypto::sign(&cfg, &mut alice.key, &bytes).unwrap();
        let (new_token, receipt) = reg
            .convert_version(
                token.token_id,
                alice.key.public_key(),
                sig,
                V2,
                alice_pq.addr(),
                600,
            )
            .unwrap();
        assert_eq!(new_token.value, 750);
        assert_eq!(new_token.version, V2);
        assert!(verify_receipt(&cfg, &receipt, &reg.register_public()));
        assert!(reg.spent.contains(&token.token_id));
        assert!(matches!(
            reg.events.last(),
            Some(LedgerEvent::Convert {
                from_version: 1,
                to_version: 2,
                ..
            })
        ));
        // Converting the now-spent token again is a double spend.
        let sig2 = crypto::sign(&cfg, &mut alice.key, &bytes).unwrap();
        let err = reg
            .convert_version(
                token.token_id,
                alice.key.public_key(),
                sig2,
                V2,
                alice_pq.addr(),
                601,
            )
            .unwrap_err();
        assert_eq!(err.code(), "DOUBLE_SPEND");
    }

    #[test]
    fn migration_schedule_validation() {
        let mut reg = new_register(45);
        assert_eq!(
            reg.set_migration(500, 100, 1000, false).unwrap_err().code(),
            "DEADLINE_ORDER"
        );
        assert!(reg.set_migration(10, 20, 30, true).is_ok());
        assert!(reg.config.downgrade_allowed);
    }

    #[test]
    fn stranded_value_counts_leftover_v1() {
        let mut reg = new_register(46);
        let mut rng = Drbg::new([47u8; 32]);
        let alice = Owner::classical(&mut rng);
        reg.mint(500, alice.addr(), V1).unwrap();
        assert_eq!(
            reg.stranded_value(900).unwrap_err().code(),
            "BEFORE_DEADLINE"
        );
        assert_eq!(reg.stranded_value(1001).unwrap(), 500);
        // An independent fold over the event log agrees.
        let (live, _) = replay_events(&reg.events);
        let replay_stranded: u64 = live
            .values()
            .filter(|t| t.version == V1)
            .map(|t| t.value)
            .sum();
        assert_eq!(replay_stranded, 500);
    }

    #[test]
    fn conservation_and_audit() {
        let mut reg = new_register(48);
        let mut rng = Drbg::new([49u8; 32]);
        let mut alice = Owner::classical(&mut rng);
        let bob = Owner::classical(&mut rng);
        let t1 = reg.mint(1000, alice.addr(), V1).unwrap();
        reg.mint(250, bob.addr(), V1).unwrap();
        assert_eq!(reg.live_value(), 1250);
        let alice_addr = alice.addr();
        let req = signed_transfer(
            &mut alice,
            t1.token_id,
            vec![
                TransferOutput {
                    value: 400,
                    owner_addr: bob.addr(),
                    version: V1,
                },
                TransferOutput {
                    value: 600,
                    owner_addr: alice_addr,
                    version: V1,
                },
            ],
        );
        reg.validate_transfer(&req, 3).unwrap();
        assert_eq!(reg.live_value(), 1250);
        assert_eq!(reg.total_minted, 1250);
        assert_eq!(reg.balance_of(&bob.addr()), 650);
        assert!(reg.audit().is_empty(), "audit: {:?}", reg.audit());
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut reg = new_register(50);
        let mut rng = Drbg::new([51u8; 32]);
        let alice = Owner::classical(&mut rng);
        reg.mint(77, alice.addr(), V1).unwrap();
        let json = serde_json::to_string(&reg).unwrap();
        let back: RegisterState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reg);
    }
}
