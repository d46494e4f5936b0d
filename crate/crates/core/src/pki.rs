//! Hybrid certificates and policy-driven chain verification.
//!
//! A certificate can carry a classical key, a PQ key (as a skippable
//! extension field), or both on one document; alternatively two single-family
//! certificates are tied together as a [`LinkedCertPair`], where the PQ
//! cert's request content is signed by the classical private key and the PQ
//! cert points back at the classical serial.
//!
//! Which key families must validate is decided at *call time* by a
//! [`VerificationPolicy`]: switching policy needs no reissuance, which is
//! the whole point of running hybrid during a migration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, hash::digest_parts, serde_hex, CryptoError, DomainTag, KeyPair, PublicKey, SchemeConfig,
    Signature, VerificationPolicy,
};
use crate::Tick;

pub type Serial = [u8; 16];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PkiError {
    #[error("NO_KEYS: a certificate needs at least one public key")]
    NoKeys,
    #[error("WRONG_ROLE: {0}")]
    WrongRole(String),
    #[error("VALIDITY_EXCEEDS_ISSUER: child window [{child_from}, {child_to}] outside issuer [{issuer_from}, {issuer_to}]")]
    ValidityExceedsIssuer {
        child_from: Tick,
        child_to: Tick,
        issuer_from: Tick,
        issuer_to: Tick,
    },
    #[error("LINK_PROOF_INVALID: {0}")]
    LinkProofInvalid(String),
    #[error("INVALID_VALIDITY: not_before {0} exceeds not_after {1}")]
    InvalidValidity(Tick, Tick),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl PkiError {
    pub fn code(&self) -> &'static str {
        match self {
            PkiError::NoKeys => "NO_KEYS",
            PkiError::WrongRole(_) => "WRONG_ROLE",
            PkiError::ValidityExceedsIssuer { .. } => "VALIDITY_EXCEEDS_ISSUER",
            PkiError::LinkProofInvalid(_) => "LINK_PROOF_INVALID",
            PkiError::InvalidValidity(..) => "INVALID_VALIDITY",
            PkiError::Crypto(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "root-ca")]
    RootCa,
    #[serde(rename = "sub-ca")]
    SubCa,
    #[serde(rename = "wallet")]
    Wallet,
    #[serde(rename = "register")]
    Register,
}

impl Role {
    pub fn is_ca(self) -> bool {
        matches!(self, Role::RootCa | Role::SubCa)
    }

    fn code(self) -> u8 {
        match self {
            Role::RootCa => 0,
            Role::SubCa => 1,
            Role::Wallet => 2,
            Role::Register => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::RootCa => "root-ca",
            Role::SubCa => "sub-ca",
            Role::Wallet => "wallet",
            Role::Register => "register",
        }
    }
}

/// A certificate. `pq_pub` and `linked_serial` are extension fields: a
/// classical-only verifier ignores them entirely, but they are still covered
/// by the issuer signatures so they cannot be stripped without detection by
/// anyone who does check signatures over the canonical encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    #[serde(with = "serde_hex::arr16")]
    pub serial: Serial,
    pub subject: String,
    pub role: Role,
    pub classical_pub: Option<PublicKey>,
    pub pq_pub: Option<PublicKey>,
    /// For the PQ half of a linked pair: the serial of the classical cert it
    /// extends.
    #[serde(with = "serde_hex::opt_arr16", default)]
    pub linked_serial: Option<Serial>,
    pub not_before: Tick,
    pub not_after: Tick,
    #[serde(with = "serde_hex::arr16")]
    pub issuer_serial: Serial,
    pub issuer_sig_classical: Option<Signature>,
    pub issuer_sig_pq: Option<Signature>,
}

fn push_frame(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend((bytes.len() as u16).to_be_bytes());
    out.extend(bytes);
}

fn push_opt_frame(out: &mut Vec<u8>, bytes: Option<&[u8]>) {
    match bytes {
        None => out.push(0),
        Some(b) => {
            out.push(1);
            push_frame(out, b);
        }
    }
}

impl Certificate {
    /// Canonical encoding of everything except the issuer signatures; this
    /// is the exact byte string the issuer signs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(self.serial);
        out.push(self.role.code());
        push_frame(&mut out, self.subject.as_bytes());
        push_opt_frame(
            &mut out,
            self.classical_pub.as_ref().map(|p| p.encode()).as_deref(),
        );
        push_opt_frame(
            &mut out,
            self.pq_pub.as_ref().map(|p| p.encode()).as_deref(),
        );
        push_opt_frame(&mut out, self.linked_serial.as_ref().map(|s| s.as_slice()));
        out.extend(self.not_before.to_be_bytes());
        out.extend(self.not_after.to_be_bytes());
        out.extend(self.issuer_serial);
        out
    }

    pub fn is_self_signed(&self) -> bool {
        self.serial == self.issuer_serial
    }
}

/// Why a chain was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainFailure {
    #[serde(rename = "expired")]
    Expired,
    #[serde(rename = "bad-signature")]
    BadSignature,
    #[serde(rename = "broken-chain")]
    BrokenChain,
    #[serde(rename = "policy-unsatisfied")]
    PolicyUnsatisfied,
    #[serde(rename = "wrong-role")]
    WrongRole,
}

impl ChainFailure {
    pub fn code(self) -> &'static str {
        match self {
            ChainFailure::Expired => "EXPIRED",
            ChainFailure::BadSignature => "BAD_SIGNATURE",
            ChainFailure::BrokenChain => "BROKEN_CHAIN",
            ChainFailure::PolicyUnsatisfied => "POLICY_UNSATISFIED",
            ChainFailure::WrongRole => "WRONG_ROLE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub ok: bool,
    pub failure: Option<ChainFailure>,
}

impl VerificationReport {
    pub fn pass() -> VerificationReport {
        VerificationReport {
            ok: true,
            failure: None,
        }
    }

    pub fn fail(failure: ChainFailure) -> VerificationReport {
        VerificationReport {
            ok: false,
            failure: Some(failure),
        }
    }
}

/// Two single-family certificates bound into one hybrid identity. The PQ
/// cert may be issued any number of ticks after the classical one; the bind
/// is the classical key's signature over the PQ cert request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedCertPair {
    pub classical_cert: Certificate,
    pub pq_cert: Certificate,
    pub link_proof: Signature,
}

/// The request content the classical key signs when asking for the linked PQ
/// certificate. Recomputable by any verifier from the issued PQ cert.
fn link_request_bytes(
    subject: &str,
    role: Role,
    pq_pub: &PublicKey,
    linked_serial: &Serial,
    not_before: Tick,
    not_after: Tick,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(*linked_serial);
    out.push(role.code());
    push_frame(&mut out, subject.as_bytes());
    push_frame(&mut out, &pq_pub.encode());
    out.extend(not_before.to_be_bytes());
    out.extend(not_after.to_be_bytes());
    out
}

/// An issuer: a CA-role certificate together with the private keys matching
/// its public ones. Issuance consumes PQ leaves, so the issuer is mutable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateAuthority {
    pub cert: Certificate,
    pub classical_key: Option<KeyPair>,
    pub pq_key: Option<KeyPair>,
    pub cfg: SchemeConfig,
    issued: u64,
}

impl CertificateAuthority {
    /// Create a self-signed root from whichever key families are supplied.
    pub fn new_root(
        subject: &str,
        classical_key: Option<KeyPair>,
        pq_key: Option<KeyPair>,
        not_before: Tick,
        not_after: Tick,
        cfg: SchemeConfig,
    ) -> Result<CertificateAuthority, PkiError> {
        if classical_key.is_none() && pq_key.is_none() {
            return Err(PkiError::NoKeys);
        }
        if not_before > not_after {
            return Err(PkiError::InvalidValidity(not_before, not_after));
        }
        let classical_pub = classical_key.as_ref().map(KeyPair::public_key);
        let pq_pub = pq_key.as_ref().map(KeyPair::public_key);
        let mut serial_parts: Vec<Vec<u8>> =
            vec![b"root-serial".to_vec(), subject.as_bytes().to_vec()];
        if let Some(p) = &classical_pub {
            serial_parts.push(p.encode());
        }
        if let Some(p) = &pq_pub {
            serial_parts.push(p.encode());
        }
        serial_parts.push(not_before.to_be_bytes().to_vec());
        let refs: Vec<&[u8]> = serial_parts.iter().map(|v| v.as_slice()).collect();
        let mut serial = [0u8; 16];
        serial.copy_from_slice(&digest_parts(DomainTag::Cert, &refs)[..16]);

        let mut cert = Certificate {
            serial,
            subject: subject.to_string(),
            role: Role::RootCa,
            classical_pub,
            pq_pub,
            linked_serial: None,
            not_before,
            not_after,
            issuer_serial: serial,
            issuer_sig_classical: None,
            issuer_sig_pq: None,
        };
        let mut ca = CertificateAuthority {
            cert: cert.clone(),
            classical_key,
            pq_key,
            cfg,
            issued: 0,
        };
        let bytes = cert.signing_bytes();
        if let Some(key) = ca.classical_key.as_mut() {
            cert.issuer_sig_classical = Some(crypto::sign(&ca.cfg, key, &bytes)?);
        }
        if let Some(key) = ca.pq_key.as_mut() {
            cert.issuer_sig_pq = Some(crypto::sign(&ca.cfg, key, &bytes)?);
        }
        ca.cert = cert;
        Ok(ca)
    }

    /// Wrap an already-issued certificate plus its private keys so it can act
    /// as an issuer. Role is checked at issue time, not here, so that the
    /// "non-CA tries to issue" path is reachable.
    pub fn from_issued(
        cert: Certificate,
        classical_key: Option<KeyPair>,
        pq_key: Option<KeyPair>,
        cfg: SchemeConfig,
    ) -> CertificateAuthority {
        CertificateAuthority {
            cert,
            classical_key,
            pq_key,
            cfg,
            issued: 0,
        }
    }

    pub fn issue(
        &mut self,
        subject: &str,
        role: Role,
        classical_pub: Option<PublicKey>,
        pq_pub: Option<PublicKey>,
        not_before: Tick,
        not_after: Tick,
    ) -> Result<Certificate, PkiError> {
        self.issue_inner(
            subject,
            role,
            classical_pub,
            pq_pub,
            None,
            not_before,
            not_after,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn issue_inner(
        &mut self,
        subject: &str,
        role: Role,
        classical_pub: Option<PublicKey>,
        pq_pub: Option<PublicKey>,
        linked_serial: Option<Serial>,
        not_before: Tick,
        not_after: Tick,
    ) -> Result<Certificate, PkiError> {
        if !self.cert.role.is_ca() {
            return Err(PkiError::WrongRole(format!(
                "{} certificates cannot issue",
                self.cert.role.name()
            )));
        }
        if role == Role::RootCa {
            return Err(PkiError::WrongRole(
                "roots are self-signed, not issued".into(),
            ));
        }
        if classical_pub.is_none() && pq_pub.is_none() {
            return Err(PkiError::NoKeys);
        }
        if not_before > not_after {
            return Err(PkiError::InvalidValidity(not_before, not_after));
        }
        if not_before < self.cert.not_before || not_after > self.cert.not_after {
            return Err(PkiError::ValidityExceedsIssuer {
                child_from: not_before,
                child_to: not_after,
                issuer_from: self.cert.not_before,
                issuer_to: self.cert.not_after,
            });
        }
        self.issued += 1;
        let mut serial = [0u8; 16];
        serial.copy_from_slice(
            &digest_parts(
                DomainTag::Cert,
                &[
                    b"serial",
                    &self.cert.serial,
                    subject.as_bytes(),
                    &self.issued.to_be_bytes(),
                ],
            )[..16],
        );
        let mut cert = Certificate {
            serial,
            subject: subject.to_string(),
            role,
            classical_pub,
            pq_pub,
            linked_serial,
            not_before,
            not_after,
            issuer_serial: self.cert.serial,
            issuer_sig_classical: None,
            issuer_sig_pq: None,
        };
        let bytes = cert.signing_bytes();
        if let Some(key) = self.classical_key.as_mut() {
            cert.issuer_sig_classical = Some(crypto::sign(&self.cfg, key, &bytes)?);
        }
        if let Some(key) = self.pq_key.as_mut() {
            cert.issuer_sig_pq = Some(crypto::sign(&self.cfg, key, &bytes)?);
        }
        Ok(cert)
    }

    /// Issue the PQ half of a linked pair: the subject proves control of the
    /// classical cert by signing the PQ request with the classical private
    /// key, and the new cert records the classical serial it extends.
    pub fn issue_linked_pq(
        &mut self,
        classical_cert: &Certificate,
        classical_key: &mut KeyPair,
        pq_pub: PublicKey,
        not_before: Tick,
        not_after: Tick,
    ) -> Result<LinkedCertPair, PkiError> {
        let cert_pub = classical_cert.classical_pub.as_ref().ok_or_else(|| {
            PkiError::LinkProofInvalid("classical cert has no classical key".into())
        })?;
        if classical_key.public_key() != *cert_pub {
            return Err(PkiError::LinkProofInvalid(
                "signing key does not match the classical certificate".into(),
            ));
        }
        let request = link_request_bytes(
            &classical_cert.subject,
            classical_cert.role,
            &pq_pub,
            &classical_cert.serial,
            not_before,
            not_after,
        );
        let link_proof = crypto::sign(&self.cfg, classical_key, &request)?;
        let pq_cert = self.issue_inner(
            &classical_cert.subject,
            classical_cert.role,
            None,
            Some(pq_pub),
            Some(classical_cert.serial),
            not_before,
            not_after,
        )?;
        Ok(LinkedCertPair {
            classical_cert: classical_cert.clone(),
            pq_cert,
            link_proof,
        })
    }
}

/// Per-family outcome when checking one issuer signature.
#[derive(Clone, Copy, PartialEq)]
enum FamilyStatus {
    Valid,
    Invalid,
    Absent,
}

fn check_family(
    cfg: &SchemeConfig,
    sig: Option<&Signature>,
    issuer_pub: Option<&PublicKey>,
    bytes: &[u8],
) -> FamilyStatus {
    let Some(sig) = sig else {
        return FamilyStatus::Absent;
    };
    let Some(public) = issuer_pub else {
        return FamilyStatus::Invalid;
    };
    match crypto::verify(cfg, &public.bytes, public.scheme, bytes, sig) {
        Ok(true) => FamilyStatus::Valid,
        // Malformed counts as invalid here: the signature field exists but
        // cannot possibly authenticate the content.
        Ok(false) | Err(_) => FamilyStatus::Invalid,
    }
}

fn combine_statuses(
    policy: VerificationPolicy,
    classical: FamilyStatus,
    pq: FamilyStatus,
) -> Result<(), ChainFailure> {
    use FamilyStatus::*;
    let one = |status: FamilyStatus| match status {
        Valid => Ok(()),
        Invalid => Err(ChainFailure::BadSignature),
        Absent => Err(ChainFailure::PolicyUnsatisfied),
    };
    match policy {
        VerificationPolicy::ClassicalOnly => one(classical),
        VerificationPolicy::PqOnly => one(pq),
        VerificationPolicy::Both => match (classical, pq) {
            (Valid, Valid) => Ok(()),
            (Invalid, _) | (_, Invalid) => Err(ChainFailure::BadSignature),
            _ => Err(ChainFailure::PolicyUnsatisfied),
        },
        VerificationPolicy::Either => match (classical, pq) {
            (Valid, _) | (_, Valid) => Ok(()),
            (Invalid, _) | (_, Invalid) => Err(ChainFailure::BadSignature),
            (Absent, Absent) => Err(ChainFailure::PolicyUnsatisfied),
        },
    }
}

/// Verify one issuance link: `child` signed by `issuer` under `policy`.
fn verify_link(
    cfg: &SchemeConfig,
    child: &Certificate,
    issuer: &Certificate,
    policy: VerificationPolicy,
) -> Result<(), ChainFailure> {
    let bytes = child.signing_bytes();
    let classical = check_family(
        cfg,
        child.issuer_sig_classical.as_ref(),
        issuer.classical_pub.as_ref(),
        &bytes,
    );
    let pq = check_family(
        cfg,
        child.issuer_sig_pq.as_ref(),
        issuer.pq_pub.as_ref(),
        &bytes,
    );
    combine_statuses(policy, classical, pq)
}

/// Verify a leaf-first chain against a trust root at one instant.
///
/// Checks run in a fixed order (shape and roles, then validity windows,
/// then signatures) so a given defect always reports the same failure.
pub fn verify_chain(
    cfg: &SchemeConfig,
    chain: &[Certificate],
    trust_root: &Certificate,
    policy: VerificationPolicy,
    now: Tick,
) -> VerificationReport {
    let Some(root) = chain.last() else {
        return VerificationReport::fail(ChainFailure::BrokenChain);
    };
    if root != trust_root || !root.is_self_signed() || root.role != Role::RootCa {
        return VerificationReport::fail(ChainFailure::BrokenChain);
    }
    for pair in chain.windows(2) {
        if pair[0].issuer_serial != pair[1].serial {
            return VerificationReport::fail(ChainFailure::BrokenChain);
        }
    }
    // Roles: leaf may be anything non-root; every intermediate must be a
    // sub-CA; self-signed roots may not appear below the top.
    for (i, cert) in chain.iter().enumerate() {
        let is_leaf = i == 0;
        let is_root = i == chain.len() - 1;
        let ok = match cert.role {
            Role::RootCa => is_root,
            Role::SubCa => !is_root,
            Role::Wallet | Role::Register => is_leaf && !is_root,
        };
        if !ok {
            return VerificationReport::fail(ChainFailure::WrongRole);
        }
    }
    for cert in chain {
        if now < cert.not_before || now > cert.not_after {
            return VerificationReport::fail(ChainFailure::Expired);
        }
    }
    for (i, cert) in chain.iter().enumerate() {
        let issuer = if i + 1 < chain.len() {
            &chain[i + 1]
        } else {
            cert
        };
        if let Err(f) = verify_link(cfg, cert, issuer, policy) {
            return VerificationReport::fail(f);
        }
    }
    VerificationReport::pass()
}

/// Verify a linked pair as one hybrid identity. `issuer_chain` is the common
/// suffix from the pair's issuer up to the root (empty if issued directly by
/// the root, in which case the root itself is the suffix).
pub fn verify_linked_pair(
    cfg: &SchemeConfig,
    pair: &LinkedCertPair,
    issuer_chain: &[Certificate],
    trust_root: &Certificate,
    policy: VerificationPolicy,
    now: Tick,
) -> VerificationReport {
    let chain_for = |leaf: &Certificate| -> Vec<Certificate> {
        let mut v = vec![leaf.clone()];
        v.extend_from_slice(issuer_chain);
        if v.len() == 1 || v.last().map(|c| !c.is_self_signed()).unwrap_or(true) {
            v.push(trust_root.clone());
        }
        v
    };
    let classical_report = || {
        verify_chain(
            cfg,
            &chain_for(&pair.classical_cert),
            trust_root,
            policy,
            now,
        )
    };
    let pq_report = || -> VerificationReport {
        if pair.pq_cert.linked_serial != Some(pair.classical_cert.serial) {
            return VerificationReport::fail(ChainFailure::BrokenChain);
        }
        let Some(pq_pub) = pair.pq_cert.pq_pub.as_ref() else {
            return VerificationReport::fail(ChainFailure::BrokenChain);
        };
        let Some(classical_pub) = pair.classical_cert.classical_pub.as_ref() else {
            return VerificationReport::fail(ChainFailure::BrokenChain);
        };
        let request = link_request_bytes(
            &pair.pq_cert.subject,
            pair.pq_cert.role,
            pq_pub,
            &pair.classical_cert.serial,
            pair.pq_cert.not_before,
            pair.pq_cert.not_after,
        );
        let proof_ok = crypto::verify(
            cfg,
            &classical_pub.bytes,
            classical_pub.scheme,
            &request,
            &pair.link_proof,
        )
        .unwrap_or(false);
        if !proof_ok {
            return VerificationReport::fail(ChainFailure::BadSignature);
        }
        verify_chain(cfg, &chain_for(&pair.pq_cert), trust_root, policy, now)
    };
    match policy {
        VerificationPolicy::ClassicalOnly => classical_report(),
        VerificationPolicy::PqOnly => pq_report(),
        VerificationPolicy::Both => {
            let c = classical_report();
            if !c.ok {
                return c;
            }
            pq_report()
        }
        VerificationPolicy::Either => {
            let c = classical_report();
            if c.ok {
                return c;
            }
            pq_report()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Drbg, SchemeId};

    fn cfg() -> SchemeConfig {
        SchemeConfig::default()
    }

    fn hybrid_root(rng: &mut Drbg) -> CertificateAuthority {
        let cfg = cfg();
        let ckey = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, rng).unwrap();
        let pkey = crypto::keygen_with_height(&cfg, SchemeId::PqMss, 4, rng).unwrap();
        CertificateAuthority::new_root("root", Some(ckey), Some(pkey), 0, 1000, cfg).unwrap()
    }

    fn wallet_keys(rng: &mut Drbg) -> (PublicKey, PublicKey) {
        let cfg = cfg();
        let c = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, rng).unwrap();
        let p = crypto::keygen_with_height(&cfg, SchemeId::PqMss, 2, rng).unwrap();
        (c.public_key(), p.public_key())
    }

    #[test]
    fn root_verifies_alone() {
        let mut rng = Drbg::new([10u8; 32]);
        let root = hybrid_root(&mut rng);
        for policy in VerificationPolicy::ALL {
            let report = verify_chain(
                &cfg(),
                std::slice::from_ref(&root.cert),
                &root.cert,
                policy,
                5,
            );
            assert!(report.ok, "hybrid root under {}", policy.name());
        }
        // Classical-only root passes exactly the policies that do not demand PQ.
        let ckey = crypto::keygen(&cfg(), SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let legacy =
            CertificateAuthority::new_root("legacy", Some(ckey), None, 0, 100, cfg()).unwrap();
        let check = |p| {
            verify_chain(
                &cfg(),
                std::slice::from_ref(&legacy.cert),
                &legacy.cert,
                p,
                5,
            )
        };
        assert!(check(VerificationPolicy::ClassicalOnly).ok);
        assert!(check(VerificationPolicy::Either).ok);
        assert_eq!(
            check(VerificationPolicy::PqOnly).failure,
            Some(ChainFailure::PolicyUnsatisfied)
        );
        assert_eq!(
            check(VerificationPolicy::Both).failure,
            Some(ChainFailure::PolicyUnsatisfied)
        );
    }

    #[test]
    fn stripped_pq_signature_fails_both_policy() {
        let mut rng = Drbg::new([11u8; 32]);
        let root = hybrid_root(&mut rng);
        let mut cert = root.cert.clone();
        cert.issuer_sig_pq = None;
        let report = verify_chain(&cfg(), &[cert.clone()], &cert, VerificationPolicy::Both, 5);
        assert_eq!(report.failure, Some(ChainFailure::PolicyUnsatisfied));
        // ...while a verifier that never looks at PQ fields is unaffected.
        let report = verify_chain(
            &cfg(),
            &[cert.clone()],
            &cert,
            VerificationPolicy::ClassicalOnly,
            5,
        );
        assert!(report.ok);
    }

    #[test]
    fn three_link_chain_and_policy_monotonicity() {
        let mut rng = Drbg::new([12u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let sub_c = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let sub_p = crypto::keygen_with_height(&cfg, SchemeId::PqMss, 4, &mut rng).unwrap();
        let sub_cert = root
            .issue(
                "sub",
                Role::SubCa,
                Some(sub_c.public_key()),
                Some(sub_p.public_key()),
                0,
                500,
            )
            .unwrap();
        let mut sub =
            CertificateAuthority::from_issued(sub_cert, Some(sub_c), Some(sub_p), cfg.clone());
        let (wc, wp) = wallet_keys(&mut rng);
        let wallet = sub
            .issue("w1", Role::Wallet, Some(wc), Some(wp), 0, 400)
            .unwrap();
        let chain = vec![wallet, sub.cert.clone(), root.cert.clone()];
        let both = verify_chain(&cfg, &chain, &root.cert, VerificationPolicy::Both, 100);
        assert!(both.ok);
        for policy in VerificationPolicy::ALL {
            assert!(
                verify_chain(&cfg, &chain, &root.cert, policy, 100).ok,
                "BOTH-valid chain must satisfy {}",
                policy.name()
            );
        }
    }

    #[test]
    fn non_ca_cannot_issue() {
        let mut rng = Drbg::new([13u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let wkey = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let wallet_cert = root
            .issue("w", Role::Wallet, Some(wkey.public_key()), None, 0, 100)
            .unwrap();
        let mut impostor = CertificateAuthority::from_issued(wallet_cert, Some(wkey), None, cfg);
        let (vc, _) = wallet_keys(&mut rng);
        let err = impostor
            .issue("victim", Role::Wallet, Some(vc), None, 0, 50)
            .unwrap_err();
        assert_eq!(err.code(), "WRONG_ROLE");
    }

    #[test]
    fn child_validity_clamped_to_issuer() {
        let mut rng = Drbg::new([14u8; 32]);
        let mut root = hybrid_root(&mut rng);
        let (wc, _) = wallet_keys(&mut rng);
        let err = root
            .issue("w", Role::Wallet, Some(wc), None, 0, 2000)
            .unwrap_err();
        assert_eq!(err.code(), "VALIDITY_EXCEEDS_ISSUER");
    }

    #[test]
    fn expiry_and_not_yet_valid() {
        let mut rng = Drbg::new([15u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let (wc, wp) = wallet_keys(&mut rng);
        let wallet = root
            .issue("w", Role::Wallet, Some(wc), Some(wp), 10, 20)
            .unwrap();
        let chain = vec![wallet, root.cert.clone()];
        for (now, want_ok) in [(9, false), (10, true), (20, true), (21, false)] {
            let report = verify_chain(&cfg, &chain, &root.cert, VerificationPolicy::Both, now);
            assert_eq!(report.ok, want_ok, "at tick {now}");
            if !want_ok {
                assert_eq!(report.failure, Some(ChainFailure::Expired));
            }
        }
    }

    #[test]
    fn corrupted_field_breaks_signature() {
        let mut rng = Drbg::new([16u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let (wc, wp) = wallet_keys(&mut rng);
        let wallet = root
            .issue("w", Role::Wallet, Some(wc), Some(wp), 0, 100)
            .unwrap();
        let mut tampered = wallet.clone();
        tampered.subject = "x".into();
        let chain = vec![tampered, root.cert.clone()];
        for policy in VerificationPolicy::ALL {
            let report = verify_chain(&cfg, &chain, &root.cert, policy, 5);
            assert_eq!(
                report.failure,
                Some(ChainFailure::BadSignature),
                "{}",
                policy.name()
            );
        }
        // Tampering only the PQ extension field goes unnoticed exactly by
        // verifiers that skip it.
        let mut ext_tampered = wallet.clone();
        ext_tampered.pq_pub = None;
        let chain = vec![ext_tampered, root.cert.clone()];
        assert_eq!(
            verify_chain(&cfg, &chain, &root.cert, VerificationPolicy::Both, 5).failure,
            Some(ChainFailure::BadSignature)
        );
        assert_eq!(
            verify_chain(
                &cfg,
                &chain,
                &root.cert,
                VerificationPolicy::ClassicalOnly,
                5
            )
            .failure,
            Some(ChainFailure::BadSignature)
        );
    }

    #[test]
    fn skip_compatibility_for_classical_verifiers() {
        // Two parallel worlds: one wallet cert carries a PQ extension key,
        // its twin never had one. A classical-only verifier must treat both
        // identically.
        let mut rng = Drbg::new([17u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let (wc, wp) = wallet_keys(&mut rng);
        let with_ext = root
            .issue("w", Role::Wallet, Some(wc.clone()), Some(wp), 0, 100)
            .unwrap();
        let without_ext = root
            .issue("w", Role::Wallet, Some(wc), None, 0, 100)
            .unwrap();
        for cert in [with_ext, without_ext] {
            let chain = vec![cert, root.cert.clone()];
            let report = verify_chain(
                &cfg,
                &chain,
                &root.cert,
                VerificationPolicy::ClassicalOnly,
                5,
            );
            assert!(report.ok);
        }
    }

    #[test]
    fn linked_pair_issued_at_different_times() {
        let mut rng = Drbg::new([18u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let mut wc_key = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let wp_key = crypto::keygen_with_height(&cfg, SchemeId::PqMss, 2, &mut rng).unwrap();
        let classical_cert = root
            .issue("w", Role::Wallet, Some(wc_key.public_key()), None, 0, 500)
            .unwrap();
        // PQ half requested 100 ticks into the classical cert's life.
        let pair = root
            .issue_linked_pq(&classical_cert, &mut wc_key, wp_key.public_key(), 100, 500)
            .unwrap();
        assert_eq!(pair.pq_cert.linked_serial, Some(classical_cert.serial));
        for policy in VerificationPolicy::ALL {
            let report = verify_linked_pair(&cfg, &pair, &[], &root.cert, policy, 150);
            assert!(report.ok, "linked pair at tick 150 under {}", policy.name());
        }
        // Before the PQ half is valid, PQ-demanding policies fail on expiry.
        assert_eq!(
            verify_linked_pair(&cfg, &pair, &[], &root.cert, VerificationPolicy::Both, 50).failure,
            Some(ChainFailure::Expired)
        );
        assert!(
            verify_linked_pair(
                &cfg,
                &pair,
                &[],
                &root.cert,
                VerificationPolicy::ClassicalOnly,
                50
            )
            .ok
        );
    }

    #[test]
    fn forged_link_proof_rejected() {
        let mut rng = Drbg::new([19u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let mut wc_key = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let mut unrelated = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        let wp_key = crypto::keygen_with_height(&cfg, SchemeId::PqMss, 2, &mut rng).unwrap();
        let classical_cert = root
            .issue("w", Role::Wallet, Some(wc_key.public_key()), None, 0, 500)
            .unwrap();
        // Construction refuses a key that does not match the classical cert.
        let err = root
            .issue_linked_pq(&classical_cert, &mut unrelated, wp_key.public_key(), 0, 500)
            .unwrap_err();
        assert_eq!(err.code(), "LINK_PROOF_INVALID");
        // A pair whose proof was swapped for an unrelated key's signature
        // fails verification on the PQ side.
        let mut pair = root
            .issue_linked_pq(&classical_cert, &mut wc_key, wp_key.public_key(), 0, 500)
            .unwrap();
        let request = link_request_bytes(
            &pair.pq_cert.subject,
            pair.pq_cert.role,
            pair.pq_cert.pq_pub.as_ref().unwrap(),
            &pair.classical_cert.serial,
            pair.pq_cert.not_before,
            pair.pq_cert.not_after,
        );
        pair.link_proof = crypto::sign(&cfg, &mut unrelated, &request).unwrap();
        assert_eq!(
            verify_linked_pair(&cfg, &pair, &[], &root.cert, VerificationPolicy::PqOnly, 5).failure,
            Some(ChainFailure::BadSignature)
        );
    }

    #[test]
    fn broken_linkage_and_wrong_root() {
        let mut rng = Drbg::new([20u8; 32]);
        let cfg = cfg();
        let mut root = hybrid_root(&mut rng);
        let other_root = hybrid_root(&mut Drbg::new([21u8; 32]));
        let (wc, wp) = wallet_keys(&mut rng);
        let wallet = root
            .issue("w", Role::Wallet, Some(wc), Some(wp), 0, 100)
            .unwrap();
        // Wrong trust root.
        let chain = vec![wallet.clone(), root.cert.clone()];
        assert_eq!(
            verify_chain(&cfg, &chain, &other_root.cert, VerificationPolicy::Both, 5).failure,
            Some(ChainFailure::BrokenChain)
        );
        // Serial mismatch inside the chain.
        let chain = vec![wallet, other_root.cert.clone()];
        assert_eq!(
            verify_chain(&cfg, &chain, &other_root.cert, VerificationPolicy::Both, 5).failure,
            Some(ChainFailure::BrokenChain)
        );
        // Empty chain.
        assert_eq!(
            verify_chain(&cfg, &[], &root.cert, VerificationPolicy::Both, 5).failure,
            Some(ChainFailure::BrokenChain)
        );
    }

    #[test]
    fn report_ok_iff_no_failure() {
        assert!(VerificationReport::pass().failure.is_none());
        assert!(!VerificationReport::fail(ChainFailure::Expired).ok);
    }
}
