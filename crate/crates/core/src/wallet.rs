//! Wallet state machines.
//!
//! A wallet is identified by sixteen random bytes drawn before any key
//! exists, so identifiers survive key rotation and algorithm upgrades. The
//! interesting behavior is all about versions: old-generation wallets only
//! understand version-1 (classical) tokens, new-generation wallets speak
//! both, and every payment starts with a capability negotiation that decides
//! which token version moves.
//!
//! Hardware wallets can be offline. An offline payment settles bilaterally
//! (the signed transfer request is the money) and both parties keep a copy
//! of the record to upload when they next reach the register.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, serde_hex, CryptoError, Drbg, KeyPair, PublicKey, SchemeConfig, SchemeId, Signature,
};
use crate::pki::{Certificate, CertificateAuthority, PkiError, Role};
use crate::register::{
    self, Addr, Receipt, RegisterError, RegisterState, Token, TransferInput, TransferOutput,
    TransferRequest, Version, V1, V2,
};
use crate::Tick;

pub type WalletId = [u8; 16];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalletError {
    #[error("INSUFFICIENT_FUNDS: balance {balance} below requested {requested}")]
    InsufficientFunds { balance: u64, requested: u64 },
    #[error("NO_COMMON_VERSION: no token version acceptable to both parties and the register")]
    NoCommonVersion,
    #[error("DOWNGRADE_REQUIRED: payment needs v2 inputs to fund v1 outputs but the register forbids downgrades")]
    DowngradeRequired,
    #[error("UNSUPPORTED_VERSION: wallet does not handle token version {0}")]
    UnsupportedVersion(Version),
    #[error("BAD_RECEIPT: register attestation does not verify")]
    BadReceipt,
    #[error("NO_MATCHING_KEY: token is not addressed to any key this wallet holds")]
    NoMatchingKey,
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Pki(#[from] PkiError),
}

impl WalletError {
    pub fn code(&self) -> &'static str {
        match self {
            WalletError::InsufficientFunds { .. } => "INSUFFICIENT_FUNDS",
            WalletError::NoCommonVersion => "NO_COMMON_VERSION",
            WalletError::DowngradeRequired => "DOWNGRADE_REQUIRED",
            WalletError::UnsupportedVersion(_) => "UNSUPPORTED_VERSION",
            WalletError::BadReceipt => "BAD_RECEIPT",
            WalletError::NoMatchingKey => "NO_MATCHING_KEY",
            WalletError::Register(e) => e.code(),
            WalletError::Crypto(e) => e.code(),
            WalletError::Pki(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WalletKind {
    #[serde(rename = "software")]
    Software,
    #[serde(rename = "hardware")]
    Hardware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generation {
    #[serde(rename = "old")]
    Old,
    #[serde(rename = "new")]
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationPolicy {
    /// Every receive and every change output goes to a brand-new address.
    #[serde(rename = "fresh-address")]
    FreshAddress,
    /// One long-lived classical address for everything version-1: the
    /// account-style anti-pattern whose public key, once revealed, exposes
    /// the whole balance.
    #[serde(rename = "reuse-address")]
    ReuseAddress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletProfile {
    pub kind: WalletKind,
    pub generation: Generation,
    pub online: bool,
}

impl WalletProfile {
    pub fn supported_versions(&self) -> BTreeSet<Version> {
        match self.generation {
            Generation::Old => BTreeSet::from([V1]),
            Generation::New => BTreeSet::from([V1, V2]),
        }
    }
}

/// A token together with the key that can spend it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holding {
    pub token: Token,
    pub key: KeyPair,
}

impl Holding {
    /// Provisional holdings stem from offline payments the register has not
    /// seen yet; they carry no mint signature until upload.
    pub fn is_provisional(&self) -> bool {
        self.token.mint_sig.is_none()
    }
}

/// A signed transfer captured offline, waiting to be uploaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferredRecord {
    pub request: TransferRequest,
    pub created_tick: Tick,
}

/// Which cell of the old/new interaction matrix a completed payment hit.
/// The letter tracks the moving token version: 'a' is version 1, 'b' is
/// version 2. Old wallets cannot emit or accept version 2, which is why
/// cases 1b and 2b do not exist as values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixCase {
    #[serde(rename = "1a")]
    C1a,
    #[serde(rename = "2a")]
    C2a,
    #[serde(rename = "3a")]
    C3a,
    #[serde(rename = "3b")]
    C3b,
    #[serde(rename = "4a")]
    C4a,
    #[serde(rename = "4b")]
    C4b,
}

impl MatrixCase {
    pub const ALL: [MatrixCase; 6] = [
        MatrixCase::C1a,
        MatrixCase::C2a,
        MatrixCase::C3a,
        MatrixCase::C3b,
        MatrixCase::C4a,
        MatrixCase::C4b,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixCase::C1a => "1a",
            MatrixCase::C2a => "2a",
            MatrixCase::C3a => "3a",
            MatrixCase::C3b => "3b",
            MatrixCase::C4a => "4a",
            MatrixCase::C4b => "4b",
        }
    }
}

fn matrix_case(
    sender: Generation,
    receiver: Generation,
    selected: Version,
    any_v2_input: bool,
) -> MatrixCase {
    match (sender, receiver) {
        (Generation::Old, Generation::Old) => {
            assert_eq!(selected, V1, "old wallets can only move v1");
            MatrixCase::C1a
        }
        (Generation::Old, Generation::New) => {
            assert_eq!(selected, V1, "old wallets can only move v1");
            MatrixCase::C2a
        }
        (Generation::New, Generation::Old) => {
            assert_eq!(selected, V1, "old wallets can only accept v1");
            if any_v2_input {
                MatrixCase::C3b
            } else {
                MatrixCase::C3a
            }
        }
        (Generation::New, Generation::New) => {
            if selected == V2 {
                MatrixCase::C4b
            } else {
                MatrixCase::C4a
            }
        }
    }
}

/// Version negotiation: the sender offers its capability set, the receiver
/// picks the highest version it also supports.
pub fn negotiate(sender: &WalletState, receiver: &WalletState) -> Result<Version, WalletError> {
    select_version(
        &sender.profile.supported_versions(),
        &receiver.profile.supported_versions(),
    )
}

fn select_version(
    offer: &BTreeSet<Version>,
    receiver: &BTreeSet<Version>,
) -> Result<Version, WalletError> {
    offer
        .intersection(receiver)
        .max()
        .copied()
        .ok_or(WalletError::NoCommonVersion)
}

/// A payment that has been built and signed but not yet settled anywhere.
#[derive(Debug, Clone)]
pub struct PreparedPayment {
    pub request: TransferRequest,
    pub case: MatrixCase,
    pub selected_version: Version,
    pub amount: u64,
    pub change_value: u64,
    /// Index of the payee output in `request.outputs` (always 0).
    pub payee_index: usize,
    pub change_index: Option<usize>,
    /// Classical key pairs whose public halves this request exposes. The
    /// attacker model treats the private halves as derivable from the
    /// moment of submission.
    pub revealed: Vec<KeyPair>,
    /// The holdings being consumed: accounting, and restoration if the
    /// register rejects the request.
    pub consumed: Vec<Holding>,
}

/// What a completed (settled or deferred) payment looked like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub case: MatrixCase,
    pub selected_version: Version,
    pub amount: u64,
    #[serde(with = "serde_hex::arr32")]
    pub transfer_digest: [u8; 32],
    /// Present when the register settled the payment immediately; absent
    /// for offline (deferred) settlement.
    pub receipt: Option<Receipt>,
    pub deferred: bool,
    /// Backlog records that were pushed through ahead of this payment.
    pub flushed: Vec<UploadOutcome>,
}

/// Outcome of uploading one deferred record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UploadOutcome {
    /// The register accepted the record now.
    Settled {
        #[serde(with = "serde_hex::arr32")]
        digest: [u8; 32],
        receipt: Receipt,
    },
    /// Someone else (the counterparty holding a copy) already uploaded it.
    AlreadySettled {
        #[serde(with = "serde_hex::arr32")]
        digest: [u8; 32],
    },
    /// The register rejected it; any provisional value that depended on it
    /// is gone.
    Failed {
        #[serde(with = "serde_hex::arr32")]
        digest: [u8; 32],
        error: String,
        error_code: String,
        lost_value: u64,
    },
}

/// Result of a holdings upgrade sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub converted: Vec<ConvertedToken>,
    pub failures: Vec<String>,
    /// Classical keys whose signatures went over the wire during the sweep.
    /// Conversions are submissions like any other; even a rejected one shows
    /// its key to whoever is listening.
    pub revealed: Vec<KeyPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedToken {
    #[serde(with = "serde_hex::arr16")]
    pub old_id: register::TokenId,
    #[serde(with = "serde_hex::arr16")]
    pub new_id: register::TokenId,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalletState {
    #[serde(with = "serde_hex::arr16")]
    pub wallet_id: WalletId,
    pub profile: WalletProfile,
    pub rotation_policy: RotationPolicy,
    pub cfg: SchemeConfig,
    pub cert: Certificate,
    cert_classical_key: KeyPair,
    cert_pq_key: Option<KeyPair>,
    /// The one long-lived classical key of a REUSE_ADDRESS wallet.
    reuse_key: Option<KeyPair>,
    /// Keys handed out as receiving/change addresses, waiting for tokens.
    incoming_keys: Vec<KeyPair>,
    pub holdings: Vec<Holding>,
    pub deferred: Vec<DeferredRecord>,
    rng: Drbg,
}

/// Merkle height for wallet identity keys: a handful of certificate-related
/// signatures is all they ever produce.
const WALLET_IDENTITY_TREE_HEIGHT: u32 = 3;

/// Create a wallet: identifier first, then keys, then a certificate (hybrid
/// for new-generation wallets, classical-only for old).
pub fn create_wallet(
    profile: WalletProfile,
    rotation_policy: RotationPolicy,
    issuer: &mut CertificateAuthority,
    not_before: Tick,
    not_after: Tick,
    rng: &mut Drbg,
) -> Result<WalletState, WalletError> {
    // The identifier is drawn before any key material exists, so no function
    // of the keys can ever reproduce or depend on it.
    let mut wallet_id = [0u8; 16];
    rng.fill_bytes(&mut wallet_id);
    let mut wallet_rng = rng.fork(b"wallet-rng");
    let cfg = issuer.cfg.clone();

    let cert_classical_key = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut wallet_rng)?;
    let cert_pq_key = match profile.generation {
        Generation::New => Some(crypto::keygen_with_height(
            &cfg,
            SchemeId::PqMss,
            WALLET_IDENTITY_TREE_HEIGHT,
            &mut wallet_rng,
        )?),
        Generation::Old => None,
    };
    let cert = issuer.issue(
        &hex::encode(wallet_id),
        Role::Wallet,
        Some(cert_classical_key.public_key()),
        cert_pq_key.as_ref().map(KeyPair::public_key),
        not_before,
        not_after,
    )?;
    let reuse_key = match rotation_policy {
        RotationPolicy::ReuseAddress => Some(crypto::keygen(
            &cfg,
            SchemeId::ClassicalSchnorr,
            &mut wallet_rng,
        )?),
        RotationPolicy::FreshAddress => None,
    };
    Ok(WalletState {
        wallet_id,
        profile,
        rotation_policy,
        cfg,
        cert,
        cert_classical_key,
        cert_pq_key,
        reuse_key,
        incoming_keys: Vec::new(),
        holdings: Vec::new(),
        deferred: Vec::new(),
        rng: wallet_rng,
    })
}

impl WalletState {
    pub fn balance(&self) -> u64 {
        self.holdings.iter().map(|h| h.token.value).sum()
    }

    /// Balance the register would recognize right now (excludes provisional
    /// offline tokens).
    pub fn settled_balance(&self) -> u64 {
        self.holdings
            .iter()
            .filter(|h| !h.is_provisional())
            .map(|h| h.token.value)
            .sum()
    }

    pub fn supported_versions(&self) -> BTreeSet<Version> {
        self.profile.supported_versions()
    }

    /// Hand out an address for an incoming token of the given version. The
    /// matching private key stays in the wallet until the token arrives.
    pub fn provide_receiving_addr(&mut self, version: Version) -> Result<Addr, WalletError> {
        if !self.supported_versions().contains(&version) {
            return Err(WalletError::UnsupportedVersion(version));
        }
        if version == V1 && self.rotation_policy == RotationPolicy::ReuseAddress {
            let key = match &self.reuse_key {
                Some(k) => k.clone(),
                None => {
                    let k = crypto::keygen(&self.cfg, SchemeId::ClassicalSchnorr, &mut self.rng)?;
                    self.reuse_key = Some(k.clone());
                    k
                }
            };
            return Ok(key.public_key().addr());
        }
        let scheme = if version == V1 {
            SchemeId::ClassicalSchnorr
        } else {
            SchemeId::PqWots
        };
        let key = crypto::keygen(&self.cfg, scheme, &mut self.rng)?;
        let addr = key.public_key().addr();
        self.incoming_keys.push(key);
        Ok(addr)
    }

    fn take_key_for(&mut self, addr: &Addr) -> Option<KeyPair> {
        if let Some(pos) = self
            .incoming_keys
            .iter()
            .position(|k| k.public_key().addr() == *addr)
        {
            return Some(self.incoming_keys.remove(pos));
        }
        // The reuse key serves any number of tokens, so it is cloned, never
        // removed.
        if let Some(k) = &self.reuse_key {
            if k.public_key().addr() == *addr {
                return Some(k.clone());
            }
        }
        None
    }

    /// Accept a register-settled token. The receipt must verify under the
    /// register's key and actually mention the token.
    pub fn receive(
        &mut self,
        token: Token,
        receipt: &Receipt,
        register_pub: &PublicKey,
    ) -> Result<(), WalletError> {
        if !self.supported_versions().contains(&token.version) {
            return Err(WalletError::UnsupportedVersion(token.version));
        }
        if !register::verify_receipt(&self.cfg, receipt, register_pub)
            || !receipt
                .new_token_ids
                .iter()
                .any(|id| id.0 == token.token_id)
        {
            return Err(WalletError::BadReceipt);
        }
        self.accept_token(token)
    }

    /// Accept a freshly minted token (genesis funding), attested by its mint
    /// signature rather than a transfer receipt.
    pub fn receive_minted(
        &mut self,
        token: Token,
        register_pub: &PublicKey,
    ) -> Result<(), WalletError> {
        if !self.supported_versions().contains(&token.version) {
            return Err(WalletError::UnsupportedVersion(token.version));
        }
        if !register::verify_token_mint(&self.cfg, &token, register_pub) {
            return Err(WalletError::BadReceipt);
        }
        self.accept_token(token)
    }

    /// Accept a provisional token from an offline bilateral settlement.
    fn receive_offline(&mut self, token: Token) -> Result<(), WalletError> {
        if !self.supported_versions().contains(&token.version) {
            return Err(WalletError::UnsupportedVersion(token.version));
        }
        self.accept_token(token)
    }

    fn accept_token(&mut self, token: Token) -> Result<(), WalletError> {
        let key = self
            .take_key_for(&token.owner_addr)
            .ok_or(WalletError::NoMatchingKey)?;
        self.holdings.push(Holding { token, key });
        Ok(())
    }

    /// Greedy token selection: prefer tokens already in the target version
    /// (largest first, ids as tie-break), fall back to the rest.
    fn select_tokens(
        &self,
        amount: u64,
        target: Version,
        include_provisional: bool,
    ) -> Option<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.holdings.len())
            .filter(|&i| include_provisional || !self.holdings[i].is_provisional())
            .collect();
        order.sort_by(|&a, &b| {
            let ha = &self.holdings[a];
            let hb = &self.holdings[b];
            let tier = |h: &Holding| if h.token.version == target { 0u8 } else { 1 };
            tier(ha)
                .cmp(&tier(hb))
                .then(hb.token.value.cmp(&ha.token.value))
                .then(ha.token.token_id.cmp(&hb.token.token_id))
        });
        let mut picked = Vec::new();
        let mut total = 0u64;
        for i in order {
            if total >= amount {
                break;
            }
            total += self.holdings[i].token.value;
            picked.push(i);
        }
        if total >= amount {
            Some(picked)
        } else {
            None
        }
    }
}

/// Build and sign a payment without settling it anywhere. The consumed
/// holdings leave the sender immediately; from the wallet's point of view
/// the money is in flight; receiving the change re-adds it on settlement.
pub fn prepare_payment(
    sender: &mut WalletState,
    receiver: &mut WalletState,
    amount: u64,
    register: &RegisterState,
    now: Tick,
) -> Result<PreparedPayment, WalletError> {
    if amount == 0 {
        return Err(WalletError::InsufficientFunds {
            balance: sender.balance(),
            requested: 0,
        });
    }
    // The sender can only offer versions the register will still accept.
    let offer: BTreeSet<Version> = sender
        .profile
        .supported_versions()
        .intersection(&register.supported_versions_at(now))
        .copied()
        .collect();
    let selected = select_version(&offer, &receiver.profile.supported_versions())?;
    if sender.profile.generation == Generation::Old {
        assert_eq!(
            selected, V1,
            "an old wallet can never emit version-2 tokens"
        );
    }

    // Offline senders may spend provisional tokens (the records travel with
    // the payment); online senders spend only settled ones.
    let include_provisional = !sender.profile.online;
    let picked = sender
        .select_tokens(amount, selected, include_provisional)
        .ok_or(WalletError::InsufficientFunds {
            balance: sender.balance(),
            requested: amount,
        })?;
    let any_v2_input = picked
        .iter()
        .any(|&i| sender.holdings[i].token.version == V2);
    // Funding a v1 payee output from v2 inputs is a version downgrade; fail
    // fast if the register will not have it.
    if selected == V1 && any_v2_input && !register.config.downgrade_allowed {
        return Err(WalletError::DowngradeRequired);
    }

    let total: u64 = picked.iter().map(|&i| sender.holdings[i].token.value).sum();
    let change_value = total - amount;
    let payee_addr = receiver.provide_receiving_addr(selected)?;
    let mut outputs = vec![TransferOutput {
        value: amount,
        owner_addr: payee_addr,
        version: selected,
    }];
    let change_index = if change_value > 0 {
        // Change keeps the highest version among the inputs: never a silent
        // downgrade, never a premature upgrade.
        let change_version = picked
            .iter()
            .map(|&i| sender.holdings[i].token.version)
            .max()
            .unwrap_or(selected);
        let change_addr = sender.provide_receiving_addr(change_version)?;
        outputs.push(TransferOutput {
            value: change_value,
            owner_addr: change_addr,
            version: change_version,
        });
        Some(1)
    } else {
        None
    };

    // Sign with cloned keys: holdings stay untouched until the request is
    // final, so a failed attempt never half-consumes a one-time key.
    let mut inputs = Vec::with_capacity(picked.len());
    for &i in &picked {
        let h = &sender.holdings[i];
        inputs.push(TransferInput {
            token_id: h.token.token_id,
            owner_pub: h.key.public_key(),
            signature: Signature {
                scheme: h.key.scheme,
                payload: Vec::new(),
                leaf_index: None,
            },
        });
    }
    let mut request = TransferRequest { inputs, outputs };
    let signing_bytes = request.signing_bytes();
    let mut signed: Vec<(PublicKey, Signature)> = Vec::new();
    for &i in &picked {
        let h = &sender.holdings[i];
        let public = h.key.public_key();
        // Inputs sharing one key (a reused address) share one signature over
        // the identical bytes instead of consuming the key twice.
        let sig = match signed.iter().find(|(p, _)| *p == public) {
            Some((_, s)) => s.clone(),
            None => {
                let mut key = h.key.clone();
                let s = crypto::sign(&sender.cfg, &mut key, &signing_bytes)?;
                signed.push((public.clone(), s.clone()));
                s
            }
        };
        let slot = request
            .inputs
            .iter_mut()
            .find(|inp| inp.token_id == h.token.token_id)
            .expect("input was just built");
        slot.signature = sig;
    }

    let revealed: Vec<KeyPair> = picked
        .iter()
        .map(|&i| &sender.holdings[i].key)
        .filter(|k| k.scheme == SchemeId::ClassicalSchnorr)
        .cloned()
        .collect();
    let consumed: Vec<Holding> = picked.iter().map(|&i| sender.holdings[i].clone()).collect();

    // Remove consumed holdings (descending indices keep positions valid).
    let mut to_remove = picked;
    to_remove.sort_unstable_by(|a, b| b.cmp(a));
    for i in to_remove {
        sender.holdings.remove(i);
    }

    let case = matrix_case(
        sender.profile.generation,
        receiver.profile.generation,
        selected,
        any_v2_input,
    );
    Ok(PreparedPayment {
        request,
        case,
        selected_version: selected,
        amount,
        change_value,
        payee_index: 0,
        change_index,
        revealed,
        consumed,
    })
}

/// After the register settled a prepared payment, move the real tokens into
/// the two wallets.
pub fn deliver_settled(
    sender: &mut WalletState,
    receiver: &mut WalletState,
    prepared: &PreparedPayment,
    receipt: &Receipt,
    register: &RegisterState,
) -> Result<(), WalletError> {
    let register_pub = register.register_public();
    let payee_id = receipt.new_token_ids[prepared.payee_index].0;
    if let Some(token) = register.live.get(&payee_id) {
        receiver.receive(token.clone(), receipt, &register_pub)?;
    }
    if let Some(ci) = prepared.change_index {
        let change_id = receipt.new_token_ids[ci].0;
        if let Some(token) = register.live.get(&change_id) {
            sender.receive(token.clone(), receipt, &register_pub)?;
        }
    }
    Ok(())
}

/// Settle a prepared payment bilaterally, without the register: both sides
/// accept provisional tokens and both keep a copy of the signed record (plus
/// every record it may depend on) for later upload.
pub fn settle_offline(
    sender: &mut WalletState,
    receiver: &mut WalletState,
    prepared: &PreparedPayment,
    now: Tick,
) -> Result<(), WalletError> {
    let digest = prepared.request.digest();
    let provisional = |index: usize| -> Token {
        let out = &prepared.request.outputs[index];
        Token {
            token_id: register::derive_output_id(&digest, index),
            version: out.version,
            value: out.value,
            owner_addr: out.owner_addr,
            mint_sig: None,
        }
    };
    receiver.receive_offline(provisional(prepared.payee_index))?;
    if let Some(ci) = prepared.change_index {
        let token = provisional(ci);
        let key = sender
            .take_key_for(&token.owner_addr)
            .ok_or(WalletError::NoMatchingKey)?;
        sender.holdings.push(Holding { token, key });
    }
    // The new record goes after everything it might depend on; the receiver
    // gets copies of the sender's whole backlog so its upload order is safe.
    let mut records = sender.deferred.clone();
    records.push(DeferredRecord {
        request: prepared.request.clone(),
        created_tick: now,
    });
    for record in records {
        let rd = record.request.digest();
        if !sender.deferred.iter().any(|r| r.request.digest() == rd) {
            sender.deferred.push(record.clone());
        }
        if !receiver.deferred.iter().any(|r| r.request.digest() == rd) {
            receiver.deferred.push(record);
        }
    }
    Ok(())
}

/// One payment, end to end: negotiate, select, sign, then settle with the
/// register if either party can reach it, bilaterally if neither can. A
/// signed request is self-contained, so an online receiver can submit it on
/// the spot even when the sender's device is offline.
pub fn pay(
    sender: &mut WalletState,
    receiver: &mut WalletState,
    amount: u64,
    register: &mut RegisterState,
    now: Tick,
) -> Result<TransferOutcome, WalletError> {
    let prepared = prepare_payment(sender, receiver, amount, register, now)?;
    let digest = prepared.request.digest();
    if sender.profile.online || receiver.profile.online {
        // Any backlog goes in first: the new request may spend outputs that
        // only exist once the sender's earlier offline records settle.
        let flushed = if sender.deferred.is_empty() {
            Vec::new()
        } else {
            sender.upload_deferred(register, now)
        };
        let receipt = match register.validate_transfer(&prepared.request, now) {
            Ok(r) => r,
            Err(e) => {
                // The request never existed as far as the world is concerned;
                // give the sender its holdings back.
                restore_consumed(sender, &prepared);
                return Err(e.into());
            }
        };
        deliver_settled(sender, receiver, &prepared, &receipt, register)?;
        Ok(TransferOutcome {
            case: prepared.case,
            selected_version: prepared.selected_version,
            amount,
            transfer_digest: digest,
            receipt: Some(receipt),
            deferred: false,
            flushed,
        })
    } else {
        settle_offline(sender, receiver, &prepared, now)?;
        Ok(TransferOutcome {
            case: prepared.case,
            selected_version: prepared.selected_version,
            amount,
            transfer_digest: digest,
            receipt: None,
            deferred: true,
            flushed: Vec::new(),
        })
    }
}

/// Roll consumed holdings back into the sender after a rejected online
/// submit. The signing clones never touched the held keys, so the holdings
/// are exactly as spendable as before.
fn restore_consumed(sender: &mut WalletState, prepared: &PreparedPayment) {
    for holding in &prepared.consumed {
        sender.holdings.push(holding.clone());
    }
}

impl WalletState {
    /// Push every deferred record to the register, in order. Failures are
    /// collected per record, not fatal; provisional holdings whose records
    /// fail are written off.
    pub fn upload_deferred(
        &mut self,
        register: &mut RegisterState,
        now: Tick,
    ) -> Vec<UploadOutcome> {
        let records = std::mem::take(&mut self.deferred);
        let register_pub = register.register_public();
        let mut outcomes = Vec::with_capacity(records.len());
        for record in records {
            let digest = record.request.digest();
            let outcome = match register.validate_transfer(&record.request, now) {
                Ok(receipt) => {
                    self.finalize_provisional(&record.request, register, &register_pub);
                    UploadOutcome::Settled { digest, receipt }
                }
                Err(RegisterError::DoubleSpend(_)) if outputs_exist(register, &record.request) => {
                    // The counterparty already uploaded its copy.
                    self.finalize_provisional(&record.request, register, &register_pub);
                    UploadOutcome::AlreadySettled { digest }
                }
                Err(e) => {
                    let lost = self.write_off_provisional(&record.request);
                    UploadOutcome::Failed {
                        digest,
                        error: e.to_string(),
                        error_code: e.code().to_string(),
                        lost_value: lost,
                    }
                }
            };
            outcomes.push(outcome);
        }
        outcomes
    }

    /// Replace provisional holdings minted by this request with the real,
    /// register-signed tokens (or drop them if someone spent them already).
    fn finalize_provisional(
        &mut self,
        request: &TransferRequest,
        register: &RegisterState,
        _register_pub: &PublicKey,
    ) {
        let digest = request.digest();
        let ids: Vec<register::TokenId> = (0..request.outputs.len())
            .map(|i| register::derive_output_id(&digest, i))
            .collect();
        for holding in &mut self.holdings {
            if holding.is_provisional() && ids.contains(&holding.token.token_id) {
                if let Some(real) = register.live.get(&holding.token.token_id) {
                    holding.token = real.clone();
                }
            }
        }
        // Provisionals already consumed on the register (e.g. stolen while
        // in transit) are no longer anyone's money.
        self.holdings.retain(|h| {
            !(h.is_provisional()
                && ids.contains(&h.token.token_id)
                && register.spent.contains(&h.token.token_id))
        });
    }

    fn write_off_provisional(&mut self, request: &TransferRequest) -> u64 {
        let digest = request.digest();
        let ids: Vec<register::TokenId> = (0..request.outputs.len())
            .map(|i| register::derive_output_id(&digest, i))
            .collect();
        let mut lost = 0;
        self.holdings.retain(|h| {
            if h.is_provisional() && ids.contains(&h.token.token_id) {
                lost += h.token.value;
                false
            } else {
                true
            }
        });
        lost
    }

    /// Convert v1 holdings to v2 on the register. Software wallets do this
    /// on their own once the soft deadline arrives; hardware wallets only
    /// when explicitly prompted (`force`).
    pub fn upgrade_holdings(
        &mut self,
        register: &mut RegisterState,
        now: Tick,
        force: bool,
    ) -> Result<ConversionReport, WalletError> {
        let mut report = ConversionReport {
            converted: Vec::new(),
            failures: Vec::new(),
            revealed: Vec::new(),
        };
        if self.profile.generation != Generation::New {
            return Ok(report);
        }
        let due = now >= register.config.soft_deadline && self.profile.kind == WalletKind::Software;
        if !(due || force) {
            return Ok(report);
        }
        let register_pub = register.register_public();
        let v1_positions: Vec<usize> = self
            .holdings
            .iter()
            .enumerate()
            .filter(|(_, h)| h.token.version == V1 && !h.is_provisional())
            .map(|(i, _)| i)
            .collect();
        // Walk back to front so removals keep indices stable.
        for &i in v1_positions.iter().rev() {
            let token = self.holdings[i].token.clone();
            let new_addr = self.provide_receiving_addr(V2)?;
            let key = self.holdings[i].key.clone();
            let req = TransferRequest {
                inputs: vec![TransferInput {
                    token_id: token.token_id,
                    owner_pub: key.public_key(),
                    signature: Signature {
                        scheme: key.scheme,
                        payload: Vec::new(),
                        leaf_index: None,
                    },
                }],
                outputs: vec![TransferOutput {
                    value: token.value,
                    owner_addr: new_addr,
                    version: V2,
                }],
            };
            let mut signing_key = key.clone();
            let sig = crypto::sign(&self.cfg, &mut signing_key, &req.signing_bytes())?;
            if key.scheme == SchemeId::ClassicalSchnorr {
                report.revealed.push(key.clone());
            }
            match register.convert_version(token.token_id, key.public_key(), sig, V2, new_addr, now)
            {
                Ok((new_token, receipt)) => {
                    self.holdings.remove(i);
                    report.converted.push(ConvertedToken {
                        old_id: token.token_id,
                        new_id: new_token.token_id,
                        value: new_token.value,
                    });
                    self.receive(new_token, &receipt, &register_pub)?;
                }
                Err(e) => report.failures.push(format!("{}: {e}", e.code())),
            }
        }
        report.converted.reverse();
        Ok(report)
    }

    /// Adopt the new generation: fresh PQ identity key and a hybrid
    /// certificate. The wallet identifier does not change; that is the whole
    /// point of keeping identifiers independent of key material.
    pub fn upgrade_generation(
        &mut self,
        issuer: &mut CertificateAuthority,
        not_before: Tick,
        not_after: Tick,
    ) -> Result<(), WalletError> {
        if self.profile.generation == Generation::New {
            return Ok(());
        }
        self.profile.generation = Generation::New;
        self.rotate_identity(issuer, not_before, not_after)
    }

    /// Rotate all identity keys and reissue the certificate under the same
    /// wallet identifier.
    pub fn rotate_identity(
        &mut self,
        issuer: &mut CertificateAuthority,
        not_before: Tick,
        not_after: Tick,
    ) -> Result<(), WalletError> {
        self.cert_classical_key =
            crypto::keygen(&self.cfg, SchemeId::ClassicalSchnorr, &mut self.rng)?;
        self.cert_pq_key = match self.profile.generation {
            Generation::New => Some(crypto::keygen_with_height(
                &self.cfg,
                SchemeId::PqMss,
                WALLET_IDENTITY_TREE_HEIGHT,
                &mut self.rng,
            )?),
            Generation::Old => None,
        };
        self.cert = issuer.issue(
            &hex::encode(self.wallet_id),
            Role::Wallet,
            Some(self.cert_classical_key.public_key()),
            self.cert_pq_key.as_ref().map(KeyPair::public_key),
            not_before,
            not_after,
        )?;
        Ok(())
    }

    /// Every distinct owner address currently holding this wallet's tokens.
    pub fn held_addrs(&self) -> BTreeSet<Addr> {
        self.holdings.iter().map(|h| h.token.owner_addr).collect()
    }
}

fn outputs_exist(register: &RegisterState, request: &TransferRequest) -> bool {
    let digest = request.digest();
    let first = register::derive_output_id(&digest, 0);
    register.live.contains_key(&first) || register.spent.contains(&first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::CertificateAuthority;
    use crate::register::RegisterConfig;

    struct Lab {
        register: RegisterState,
        issuer: CertificateAuthority,
        rng: Drbg,
    }

    fn lab(seed: u8) -> Lab {
        let mut rng = Drbg::new([seed; 32]);
        let cfg = SchemeConfig::default();
        let ckey = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let pkey = crypto::keygen_with_height(&cfg, SchemeId::PqMss, 6, &mut rng).unwrap();
        let issuer =
            CertificateAuthority::new_root("root", Some(ckey), Some(pkey), 0, 10_000, cfg).unwrap();
        let register = RegisterState::new(
            RegisterConfig {
                receipt_tree_height: 8,
                ..RegisterConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        Lab {
            register,
            issuer,
            rng,
        }
    }

    fn profile(kind: WalletKind, generation: Generation) -> WalletProfile {
        WalletProfile {
            kind,
            generation,
            online: true,
        }
    }

    impl Lab {
        fn wallet(&mut self, generation: Generation, rotation: RotationPolicy) -> WalletState {
            create_wallet(
                profile(WalletKind::Software, generation),
                rotation,
                &mut self.issuer,
                0,
                10_000,
                &mut self.rng,
            )
            .unwrap()
        }

        fn fund(&mut self, wallet: &mut WalletState, value: u64) {
            let addr = wallet.provide_receiving_addr(V1).unwrap();
            let token = self.register.mint(value, addr, V1).unwrap();
            wallet
                .receive_minted(token, &self.register.register_public())
                .unwrap();
        }

        fn fund_v2(&mut self, wallet: &mut WalletState, value: u64, now: Tick) {
            self.register.advance_clock(now);
            let addr = wallet.provide_receiving_addr(V2).unwrap();
            let token = self.register.mint(value, addr, V2).unwrap();
            wallet
                .receive_minted(token, &self.register.register_public())
                .unwrap();
        }
    }

    #[test]
    fn wallet_ids_are_distinct_and_stable() {
        let mut lab = lab(60);
        let mut w1 = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let w2 = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        assert_ne!(w1.wallet_id, w2.wallet_id);
        let id = w1.wallet_id;
        w1.rotate_identity(&mut lab.issuer, 0, 10_000).unwrap();
        assert_eq!(w1.wallet_id, id);
        w1.upgrade_generation(&mut lab.issuer, 0, 10_000).unwrap();
        assert_eq!(w1.wallet_id, id);
        assert_eq!(w1.profile.generation, Generation::New);
    }

    #[test]
    fn old_wallet_cert_has_no_pq_extension() {
        let mut lab = lab(61);
        let old = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        assert!(old.cert.pq_pub.is_none());
        assert!(old.cert.classical_pub.is_some());
        let new = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        assert!(new.cert.pq_pub.is_some());
    }

    #[test]
    fn negotiation_picks_highest_common_version() {
        let mut lab = lab(62);
        let old_a = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let old_b = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let new_a = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        let new_b = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        assert_eq!(negotiate(&new_a, &old_a).unwrap(), V1);
        assert_eq!(negotiate(&new_a, &new_b).unwrap(), V2);
        assert_eq!(negotiate(&old_a, &old_b).unwrap(), V1);
        assert_eq!(negotiate(&old_a, &new_a).unwrap(), V1);
    }

    #[test]
    fn payment_cases_label_correctly() {
        let mut lab = lab(63);
        let mut old_a = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let mut old_b = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let mut new_a = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        let mut new_b = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        for w in [&mut old_a, &mut old_b, &mut new_a, &mut new_b] {
            lab.fund(w, 1000);
        }
        // Before v2 activation everything moves as v1.
        let out = pay(&mut old_a, &mut old_b, 100, &mut lab.register, 10).unwrap();
        assert_eq!(out.case, MatrixCase::C1a);
        let out = pay(&mut old_a, &mut new_a, 100, &mut lab.register, 11).unwrap();
        assert_eq!(out.case, MatrixCase::C2a);
        let out = pay(&mut new_a, &mut old_a, 100, &mut lab.register, 12).unwrap();
        assert_eq!(out.case, MatrixCase::C3a);
        let out = pay(&mut new_a, &mut new_b, 100, &mut lab.register, 13).unwrap();
        assert_eq!(out.case, MatrixCase::C4a, "v2 not yet active, so 4a not 4b");
        assert_eq!(out.selected_version, V1);
        // After activation new->new goes v2.
        let out = pay(&mut new_a, &mut new_b, 100, &mut lab.register, 150).unwrap();
        assert_eq!(out.case, MatrixCase::C4b);
        assert_eq!(out.selected_version, V2);
        // Old wallets keep moving v1 after activation.
        let out = pay(&mut old_a, &mut old_b, 50, &mut lab.register, 151).unwrap();
        assert_eq!(out.case, MatrixCase::C1a);
        assert_eq!(out.selected_version, V1);
    }

    #[test]
    fn downgrade_required_when_only_v2_funds_v1_payee() {
        let mut lab = lab(64);
        let mut sender = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        let mut old_receiver = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        lab.fund_v2(&mut sender, 1000, 200);
        let err = pay(&mut sender, &mut old_receiver, 100, &mut lab.register, 201).unwrap_err();
        assert_eq!(err.code(), "DOWNGRADE_REQUIRED");
        // The sender keeps its money after the refusal.
        assert_eq!(sender.balance(), 1000);
        // With downgrades enabled the same payment settles as case 3b.
        lab.register.config.downgrade_allowed = true;
        let out = pay(&mut sender, &mut old_receiver, 100, &mut lab.register, 202).unwrap();
        assert_eq!(out.case, MatrixCase::C3b);
        assert_eq!(old_receiver.balance(), 100);
        // Change stays v2: no silent downgrade of the remainder.
        assert_eq!(sender.holdings.len(), 1);
        assert_eq!(sender.holdings[0].token.version, V2);
        assert_eq!(sender.balance(), 900);
    }

    #[test]
    fn mixed_holdings_prefer_target_version() {
        let mut lab = lab(65);
        let mut sender = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        let mut old_receiver = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        lab.fund(&mut sender, 500);
        lab.fund_v2(&mut sender, 800, 200);
        // v1 funds suffice, so no downgrade is needed even though a larger
        // v2 token exists.
        let out = pay(&mut sender, &mut old_receiver, 300, &mut lab.register, 201).unwrap();
        assert_eq!(out.case, MatrixCase::C3a);
        assert_eq!(sender.balance(), 1000);
    }

    #[test]
    fn insufficient_funds_reported() {
        let mut lab = lab(66);
        let mut a = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let mut b = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        lab.fund(&mut a, 100);
        let err = pay(&mut a, &mut b, 500, &mut lab.register, 1).unwrap_err();
        assert_eq!(err.code(), "INSUFFICIENT_FUNDS");
        assert_eq!(a.balance(), 100);
    }

    #[test]
    fn no_common_version_after_hard_deadline_for_old_sender() {
        let mut lab = lab(67);
        let mut a = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let mut b = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        lab.fund(&mut a, 100);
        let err = pay(&mut a, &mut b, 50, &mut lab.register, 1500).unwrap_err();
        assert_eq!(err.code(), "NO_COMMON_VERSION");
    }

    #[test]
    fn receive_rejects_wrong_version_and_bad_receipt() {
        let mut lab = lab(68);
        let mut old = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        let mut new_a = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        let mut new_b = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        lab.fund(&mut new_a, 1000);
        let out = pay(&mut new_a, &mut new_b, 200, &mut lab.register, 150).unwrap();
        let receipt = out.receipt.unwrap();
        let token = new_b
            .holdings
            .iter()
            .find(|h| h.token.value == 200)
            .unwrap()
            .token
            .clone();
        // A v2 token bounces off an old wallet regardless of paperwork.
        let err = old
            .receive(token.clone(), &receipt, &lab.register.register_public())
            .unwrap_err();
        assert_eq!(err.code(), "UNSUPPORTED_VERSION");
        // A tampered receipt bounces off anyone.
        let mut bad = receipt.clone();
        bad.tick += 1;
        let err = new_b
            .receive(token, &bad, &lab.register.register_public())
            .unwrap_err();
        assert_eq!(err.code(), "BAD_RECEIPT");
    }

    #[test]
    fn offline_payment_defers_and_uploads() {
        let mut lab = lab(69);
        let mut sender = create_wallet(
            WalletProfile {
                kind: WalletKind::Hardware,
                generation: Generation::New,
                online: false,
            },
            RotationPolicy::FreshAddress,
            &mut lab.issuer,
            0,
            10_000,
            &mut lab.rng,
        )
        .unwrap();
        let mut receiver = create_wallet(
            WalletProfile {
                kind: WalletKind::Hardware,
                generation: Generation::New,
                online: false,
            },
            RotationPolicy::FreshAddress,
            &mut lab.issuer,
            0,
            10_000,
            &mut lab.rng,
        )
        .unwrap();
        // Fund while briefly online.
        sender.profile.online = true;
        lab.fund(&mut sender, 1000);
        sender.profile.online = false;

        let out = pay(&mut sender, &mut receiver, 300, &mut lab.register, 900).unwrap();
        assert!(out.deferred);
        assert!(out.receipt.is_none());
        // Bilateral settlement: both sides carry provisional value and a copy
        // of the record.
        assert_eq!(receiver.balance(), 300);
        assert_eq!(sender.balance(), 700);
        assert!(receiver.holdings.iter().all(Holding::is_provisional));
        assert_eq!(sender.deferred.len(), 1);
        assert_eq!(receiver.deferred.len(), 1);
        assert_eq!(lab.register.live_value(), 1000);

        // Receiver comes online first and uploads.
        let outcomes = receiver.upload_deferred(&mut lab.register, 950);
        assert_eq!(outcomes.len(), 1);
        assert!(matches!(outcomes[0], UploadOutcome::Settled { .. }));
        assert!(receiver.holdings.iter().all(|h| !h.is_provisional()));
        assert_eq!(receiver.balance(), 300);

        // Sender's copy is now redundant; upload reports it as such.
        let outcomes = sender.upload_deferred(&mut lab.register, 951);
        assert!(matches!(outcomes[0], UploadOutcome::AlreadySettled { .. }));
        assert!(sender.holdings.iter().all(|h| !h.is_provisional()));
        assert_eq!(sender.balance(), 700);
    }

    #[test]
    fn offline_chain_uploads_in_dependency_order() {
        let mut lab = lab(70);
        let mk_hw = |lab: &mut Lab| {
            create_wallet(
                WalletProfile {
                    kind: WalletKind::Hardware,
                    generation: Generation::New,
                    online: false,
                },
                RotationPolicy::FreshAddress,
                &mut lab.issuer,
                0,
                10_000,
                &mut lab.rng,
            )
            .unwrap()
        };
        let mut a = mk_hw(&mut lab);
        let mut b = mk_hw(&mut lab);
        let mut c = mk_hw(&mut lab);
        a.profile.online = true;
        lab.fund(&mut a, 1000);
        a.profile.online = false;

        pay(&mut a, &mut b, 400, &mut lab.register, 10).unwrap();
        // B spends its provisional token onward while still offline.
        pay(&mut b, &mut c, 150, &mut lab.register, 11).unwrap();
        assert_eq!(c.balance(), 150);
        assert_eq!(b.deferred.len(), 2, "B carries A->B and B->C");
        assert_eq!(c.deferred.len(), 2, "C carries copies of the whole chain");

        // C uploads both records; order makes the chain settle cleanly.
        let outcomes = c.upload_deferred(&mut lab.register, 50);
        assert_eq!(outcomes.len(), 2);
        assert!(matches!(outcomes[0], UploadOutcome::Settled { .. }));
        assert!(matches!(outcomes[1], UploadOutcome::Settled { .. }));
        assert_eq!(
            lab.register.balance_of(&c.holdings[0].token.owner_addr),
            150
        );

        // Stale copies from A and B resolve as already settled.
        let outcomes = b.upload_deferred(&mut lab.register, 51);
        assert!(outcomes
            .iter()
            .all(|o| matches!(o, UploadOutcome::AlreadySettled { .. })));
        assert_eq!(b.balance(), 250);
        assert!(b.holdings.iter().all(|h| !h.is_provisional()));
    }

    #[test]
    fn late_upload_hits_version_deadline_and_writes_off_value() {
        let mut lab = lab(71);
        let mut sender = create_wallet(
            WalletProfile {
                kind: WalletKind::Hardware,
                generation: Generation::Old,
                online: false,
            },
            RotationPolicy::FreshAddress,
            &mut lab.issuer,
            0,
            10_000,
            &mut lab.rng,
        )
        .unwrap();
        let mut receiver = mk_receiver(&mut lab);
        sender.profile.online = true;
        lab.fund(&mut sender, 500);
        sender.profile.online = false;

        // Offline v1 payment at tick 900 (hard deadline is 1000).
        pay(&mut sender, &mut receiver, 200, &mut lab.register, 900).unwrap();
        assert_eq!(receiver.balance(), 200);
        // Upload only at tick 1050: the register no longer takes v1 inputs.
        let outcomes = receiver.upload_deferred(&mut lab.register, 1050);
        match &outcomes[0] {
            UploadOutcome::Failed {
                error_code,
                lost_value,
                ..
            } => {
                assert_eq!(error_code, "TOKEN_VERSION_EXPIRED");
                assert_eq!(*lost_value, 200);
            }
            other => panic!("expected failure, got {other:?}"),
        }
        assert_eq!(receiver.balance(), 0, "provisional value written off");
        // Empty deferred list uploads to an empty report.
        assert!(receiver.upload_deferred(&mut lab.register, 1051).is_empty());
    }

    fn mk_receiver(lab: &mut Lab) -> WalletState {
        create_wallet(
            WalletProfile {
                kind: WalletKind::Hardware,
                generation: Generation::Old,
                online: false,
            },
            RotationPolicy::FreshAddress,
            &mut lab.issuer,
            0,
            10_000,
            &mut lab.rng,
        )
        .unwrap()
    }

    #[test]
    fn holdings_upgrade_rules() {
        let mut lab = lab(72);
        let mut soft = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        for _ in 0..3 {
            lab.fund(&mut soft, 300);
        }
        // Too early: nothing converts.
        let report = soft
            .upgrade_holdings(&mut lab.register, 400, false)
            .unwrap();
        assert!(report.converted.is_empty());
        // At the soft deadline a software wallet converts everything.
        let report = soft
            .upgrade_holdings(&mut lab.register, 500, false)
            .unwrap();
        assert_eq!(report.converted.len(), 3);
        assert_eq!(report.converted.iter().map(|c| c.value).sum::<u64>(), 900);
        assert!(soft.holdings.iter().all(|h| h.token.version == V2));
        assert_eq!(soft.balance(), 900);

        // A hardware wallet sits tight unless prompted.
        let mut hard = create_wallet(
            WalletProfile {
                kind: WalletKind::Hardware,
                generation: Generation::New,
                online: true,
            },
            RotationPolicy::FreshAddress,
            &mut lab.issuer,
            0,
            10_000,
            &mut lab.rng,
        )
        .unwrap();
        lab.fund(&mut hard, 400);
        let report = hard
            .upgrade_holdings(&mut lab.register, 600, false)
            .unwrap();
        assert!(report.converted.is_empty());
        let report = hard.upgrade_holdings(&mut lab.register, 600, true).unwrap();
        assert_eq!(report.converted.len(), 1);

        // Old wallets have nothing to convert to.
        let mut old = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        lab.fund(&mut old, 100);
        let report = old.upgrade_holdings(&mut lab.register, 600, true).unwrap();
        assert!(report.converted.is_empty());
    }

    #[test]
    fn fresh_address_wallets_never_repeat_addresses() {
        let mut lab = lab(73);
        let mut a = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        let mut b = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        lab.fund(&mut a, 1000);
        lab.fund(&mut b, 1000);
        for tick in 0..8u64 {
            let (s, r) = if tick % 2 == 0 {
                (&mut a, &mut b)
            } else {
                (&mut b, &mut a)
            };
            pay(s, r, 50 + tick, &mut lab.register, tick).unwrap();
        }
        // Count distinct addresses across the whole run: every token the two
        // wallets ever held sat at its own address.
        let mut all_addrs: Vec<Addr> = lab
            .register
            .events
            .iter()
            .flat_map(|e| match e {
                register::LedgerEvent::Mint { token, .. } => vec![token.owner_addr],
                register::LedgerEvent::Transfer { outputs, .. } => {
                    outputs.iter().map(|o| o.owner_addr).collect()
                }
                register::LedgerEvent::Convert { output, .. } => vec![output.owner_addr],
            })
            .collect();
        let total = all_addrs.len();
        all_addrs.sort();
        all_addrs.dedup();
        assert_eq!(all_addrs.len(), total, "an address was used twice");
    }

    #[test]
    fn reuse_wallet_keeps_one_classical_address() {
        let mut lab = lab(74);
        let mut reuser = lab.wallet(Generation::Old, RotationPolicy::ReuseAddress);
        let mut peer = lab.wallet(Generation::Old, RotationPolicy::FreshAddress);
        lab.fund(&mut reuser, 500);
        lab.fund(&mut reuser, 300);
        let addrs = reuser.held_addrs();
        assert_eq!(addrs.len(), 1, "both deposits landed on the same address");
        // Pay out with change: the change returns to the same address.
        pay(&mut reuser, &mut peer, 100, &mut lab.register, 1).unwrap();
        assert_eq!(reuser.held_addrs(), addrs);
        assert_eq!(reuser.balance(), 700);
    }

    #[test]
    fn wallet_state_serializes() {
        let mut lab = lab(75);
        let mut w = lab.wallet(Generation::New, RotationPolicy::FreshAddress);
        lab.fund(&mut w, 250);
        let json = serde_json::to_string(&w).unwrap();
        let back: WalletState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
    }
}
