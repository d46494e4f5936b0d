//! Python bindings: key objects and signature checks, an in-memory lab
//! (register, certificate authority, named wallets), and the scenario
//! runner. Errors surface as `ValueError` carrying the core error code.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use pqcbdc_core::crypto::{
    self, hash, scheme_sizes_with_height, Drbg, KeyPair, PublicKey, SchemeConfig, SchemeId,
    Signature, VerificationPolicy,
};
use pqcbdc_core::pki::CertificateAuthority;
use pqcbdc_core::register::{RegisterConfig, RegisterState, Version};
use pqcbdc_core::sim::{self, ReportFormat, ScenarioConfig};
use pqcbdc_core::wallet::{
    self, Generation, RotationPolicy, UploadOutcome, WalletKind, WalletProfile, WalletState,
};
use pqcbdc_core::Tick;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn seed32(seed: &[u8]) -> PyResult<[u8; 32]> {
    seed.try_into()
        .map_err(|_| PyValueError::new_err(format!("seed must be 32 bytes, got {}", seed.len())))
}

fn parse_scheme(name: &str) -> PyResult<SchemeId> {
    SchemeId::parse(name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown scheme {name:?}; expected classical-schnorr, pq-wots, pq-mss or hybrid-cm"
        ))
    })
}

fn parse_policy(name: &str) -> PyResult<VerificationPolicy> {
    VerificationPolicy::parse(name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown policy {name:?}; expected classical-only, pq-only, both or either"
        ))
    })
}

/// One signing key. `sign` mutates one-time-key state, so a key that has
/// spent its signatures refuses further use rather than repeating one.
#[pyclass]
struct Key {
    inner: KeyPair,
    cfg: SchemeConfig,
}

#[pymethods]
impl Key {
    #[new]
    #[pyo3(signature = (scheme, seed, mss_height=None))]
    fn new(scheme: &str, seed: &[u8], mss_height: Option<u32>) -> PyResult<Self> {
        let scheme = parse_scheme(scheme)?;
        let cfg = SchemeConfig::default();
        let mut rng = Drbg::new(seed32(seed)?);
        let height = mss_height.unwrap_or(cfg.mss_height);
        let inner =
            crypto::keygen_with_height(&cfg, scheme, height, &mut rng).map_err(value_err)?;
        Ok(Key { inner, cfg })
    }

    #[getter]
    fn scheme(&self) -> &'static str {
        self.inner.scheme.name()
    }

    /// Hex owner address derived from the public key.
    #[getter]
    fn address(&self) -> String {
        hex::encode(self.inner.public_key().addr())
    }

    /// Signatures left on a one-time or Merkle key; None for stateless keys.
    #[getter]
    fn signatures_remaining(&self) -> Option<u64> {
        self.inner.remaining_signatures()
    }

    /// Encoded public key (scheme byte plus key material).
    fn public_key(&self) -> Vec<u8> {
        self.inner.public_key().encode()
    }

    /// Sign a message; returns the encoded signature.
    fn sign(&mut self, message: &[u8]) -> PyResult<Vec<u8>> {
        let sig = crypto::sign(&self.cfg, &mut self.inner, message).map_err(value_err)?;
        Ok(sig.encode())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(data: &str) -> PyResult<Self> {
        let inner: KeyPair = serde_json::from_str(data).map_err(value_err)?;
        Ok(Key {
            inner,
            cfg: SchemeConfig::default(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Key(scheme={:?}, address={:?})",
            self.scheme(),
            self.address()
        )
    }
}

/// Check an encoded signature against an encoded public key. Returns False
/// on an honest mismatch; raises ValueError when the bytes are malformed.
#[pyfunction]
fn verify(public_key: &[u8], message: &[u8], signature: &[u8]) -> PyResult<bool> {
    let cfg = SchemeConfig::default();
    let public = PublicKey::decode(public_key).map_err(value_err)?;
    let sig = Signature::decode(signature).map_err(value_err)?;
    crypto::verify(&cfg, &public.bytes, public.scheme, message, &sig).map_err(value_err)
}

/// Sign with a classical and a post-quantum key at once; returns one encoded
/// hybrid signature carrying both.
#[pyfunction]
fn hybrid_sign(
    mut classical: PyRefMut<'_, Key>,
    mut pq: PyRefMut<'_, Key>,
    message: &[u8],
) -> PyResult<Vec<u8>> {
    let cfg = SchemeConfig::default();
    let sig = crypto::hybrid_sign(&cfg, &mut classical.inner, &mut pq.inner, message)
        .map_err(value_err)?;
    Ok(sig.encode())
}

/// Check a hybrid signature under a named policy: classical-only, pq-only,
/// both or either.
#[pyfunction]
fn hybrid_verify(
    classical_public: &[u8],
    pq_public: &[u8],
    message: &[u8],
    signature: &[u8],
    policy: &str,
) -> PyResult<bool> {
    let cfg = SchemeConfig::default();
    let policy = parse_policy(policy)?;
    let classical = PublicKey::decode(classical_public).map_err(value_err)?;
    let pq = PublicKey::decode(pq_public).map_err(value_err)?;
    let sig = Signature::decode(signature).map_err(value_err)?;
    crypto::hybrid_verify(&cfg, &classical.bytes, &pq, message, &sig, policy).map_err(value_err)
}

/// Domain-separated hash; `tag` must name a registered domain.
#[pyfunction]
fn domain_hash(data: &[u8], tag: &str) -> PyResult<Vec<u8>> {
    hash::hash(data, tag).map(|d| d.to_vec()).map_err(value_err)
}

/// Byte sizes per scheme as a list of dicts.
#[pyfunction]
#[pyo3(signature = (scheme=None, mss_height=None))]
fn scheme_sizes<'py>(
    py: Python<'py>,
    scheme: Option<&str>,
    mss_height: Option<u32>,
) -> PyResult<Bound<'py, PyList>> {
    let cfg = SchemeConfig::default();
    let height = mss_height.unwrap_or(cfg.mss_height);
    let schemes = match scheme {
        Some(name) => vec![parse_scheme(name)?],
        None => vec![
            SchemeId::ClassicalSchnorr,
            SchemeId::PqWots,
            SchemeId::PqMss,
            SchemeId::HybridCm,
        ],
    };
    let out = PyList::empty(py);
    for scheme in schemes {
        let sizes = scheme_sizes_with_height(&cfg, scheme, height).map_err(value_err)?;
        let row = PyDict::new(py);
        row.set_item("scheme", scheme.name())?;
        row.set_item("public", sizes.public_bytes)?;
        row.set_item("private", sizes.private_bytes)?;
        row.set_item("signature", sizes.signature_bytes)?;
        out.append(row)?;
    }
    Ok(out)
}

/// Outcome of one scenario run.
#[pyclass]
struct SimResult {
    #[pyo3(get)]
    csv: String,
    #[pyo3(get)]
    rows_json: String,
    #[pyo3(get)]
    ticks: u64,
    #[pyo3(get)]
    transfers: u64,
    #[pyo3(get)]
    thefts_value: u64,
    #[pyo3(get)]
    stranded_value: u64,
    #[pyo3(get)]
    live_v1_value: u64,
    #[pyo3(get)]
    live_v2_value: u64,
    #[pyo3(get)]
    total_minted: u64,
}

#[pymethods]
impl SimResult {
    fn __repr__(&self) -> String {
        format!(
            "SimResult(ticks={}, transfers={}, thefts_value={}, stranded_value={})",
            self.ticks, self.transfers, self.thefts_value, self.stranded_value
        )
    }
}

/// Run a scenario from its JSON config and return the metrics.
#[pyfunction]
fn run_scenario(config_json: &str) -> PyResult<SimResult> {
    let config: ScenarioConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let world = sim::run_scenario(&config).map_err(value_err)?;
    let csv = sim::report(&world.series, ReportFormat::Csv).map_err(value_err)?;
    let rows_json = sim::report(&world.series, ReportFormat::Json).map_err(value_err)?;
    let last = world.series.last().expect("a run has at least one row");
    Ok(SimResult {
        csv,
        rows_json,
        ticks: config.total_ticks,
        transfers: world.series.rows.iter().map(|r| r.tx_total()).sum(),
        thefts_value: last.thefts_value,
        stranded_value: last.stranded_value,
        live_v1_value: last.live_v1_value,
        live_v2_value: last.live_v2_value,
        total_minted: world.register.total_minted,
    })
}

/// In-memory lab: one register, one root authority, wallets by name.
#[pyclass]
struct Lab {
    register: RegisterState,
    issuer: CertificateAuthority,
    wallets: BTreeMap<String, WalletState>,
    rng: Drbg,
    cert_window: (Tick, Tick),
}

impl Lab {
    fn wallet_mut(&mut self, name: &str) -> PyResult<&mut WalletState> {
        self.wallets
            .get_mut(name)
            .ok_or_else(|| PyKeyError::new_err(format!("no wallet named {name:?}")))
    }

    fn wallet_ref(&self, name: &str) -> PyResult<&WalletState> {
        self.wallets
            .get(name)
            .ok_or_else(|| PyKeyError::new_err(format!("no wallet named {name:?}")))
    }
}

#[pymethods]
impl Lab {
    #[new]
    #[pyo3(signature = (
        seed,
        tree_height=10,
        v2_activation=100,
        soft_deadline=500,
        hard_deadline=1000,
        downgrade_allowed=false,
    ))]
    fn new(
        seed: &[u8],
        tree_height: u32,
        v2_activation: Tick,
        soft_deadline: Tick,
        hard_deadline: Tick,
        downgrade_allowed: bool,
    ) -> PyResult<Self> {
        let mut rng = Drbg::new(seed32(seed)?);
        let config = RegisterConfig {
            receipt_tree_height: tree_height,
            v2_activation,
            soft_deadline,
            hard_deadline,
            downgrade_allowed,
            ..RegisterConfig::default()
        };
        let register = RegisterState::new(config, &mut rng.fork(b"register")).map_err(value_err)?;
        let scheme_cfg = SchemeConfig::default();
        let mut ca_rng = rng.fork(b"authority");
        let classical = crypto::keygen(&scheme_cfg, SchemeId::ClassicalSchnorr, &mut ca_rng)
            .map_err(value_err)?;
        let pq = crypto::keygen_with_height(&scheme_cfg, SchemeId::PqMss, 8, &mut ca_rng)
            .map_err(value_err)?;
        let cert_window = (0, 1_000_000_000);
        let issuer = CertificateAuthority::new_root(
            "lab-root",
            Some(classical),
            Some(pq),
            cert_window.0,
            cert_window.1,
            scheme_cfg,
        )
        .map_err(value_err)?;
        Ok(Lab {
            register,
            issuer,
            wallets: BTreeMap::new(),
            rng,
            cert_window,
        })
    }

    /// Current register tick.
    #[getter]
    fn clock(&self) -> Tick {
        self.register.clock
    }

    /// Move the register clock forward (never backward).
    fn advance(&mut self, tick: Tick) {
        self.register.advance_clock(tick);
    }

    /// Token versions the register accepts for new outputs right now.
    fn supported_versions(&self) -> Vec<Version> {
        self.register.supported_versions().into_iter().collect()
    }

    fn live_value(&self) -> u64 {
        self.register.live_value()
    }

    #[getter]
    fn total_minted(&self) -> u64 {
        self.register.total_minted
    }

    fn wallet_names(&self) -> Vec<String> {
        self.wallets.keys().cloned().collect()
    }

    #[pyo3(signature = (name, generation="new", kind="software", rotation="fresh-address", online=true))]
    fn create_wallet(
        &mut self,
        name: &str,
        generation: &str,
        kind: &str,
        rotation: &str,
        online: bool,
    ) -> PyResult<String> {
        if self.wallets.contains_key(name) {
            return Err(PyValueError::new_err(format!(
                "wallet {name:?} already exists"
            )));
        }
        let generation = match generation {
            "old" => Generation::Old,
            "new" => Generation::New,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown generation {other:?}; expected old or new"
                )))
            }
        };
        let kind = match kind {
            "software" => WalletKind::Software,
            "hardware" => WalletKind::Hardware,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown kind {other:?}; expected software or hardware"
                )))
            }
        };
        let rotation = match rotation {
            "fresh-address" => RotationPolicy::FreshAddress,
            "reuse-address" => RotationPolicy::ReuseAddress,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown rotation {other:?}; expected fresh-address or reuse-address"
                )))
            }
        };
        let mut rng = self.rng.fork(name.as_bytes());
        let wallet = wallet::create_wallet(
            WalletProfile {
                kind,
                generation,
                online,
            },
            rotation,
            &mut self.issuer,
            self.cert_window.0,
            self.cert_window.1,
            &mut rng,
        )
        .map_err(value_err)?;
        let id = hex::encode(wallet.wallet_id);
        self.wallets.insert(name.to_string(), wallet);
        Ok(id)
    }

    /// Mint new money straight into a wallet; returns the token id (hex).
    #[pyo3(signature = (name, value, version=1))]
    fn mint(&mut self, name: &str, value: u64, version: Version) -> PyResult<String> {
        let register = &mut self.register;
        let wallet = self
            .wallets
            .get_mut(name)
            .ok_or_else(|| PyKeyError::new_err(format!("no wallet named {name:?}")))?;
        let addr = wallet.provide_receiving_addr(version).map_err(value_err)?;
        let token = register.mint(value, addr, version).map_err(value_err)?;
        let id = hex::encode(token.token_id);
        wallet
            .receive_minted(token, &register.register_public())
            .map_err(value_err)?;
        Ok(id)
    }

    fn balance(&self, name: &str) -> PyResult<u64> {
        Ok(self.wallet_ref(name)?.balance())
    }

    fn settled_balance(&self, name: &str) -> PyResult<u64> {
        Ok(self.wallet_ref(name)?.settled_balance())
    }

    /// Pay `amount` from one wallet to another at the current tick.
    fn pay<'py>(
        &mut self,
        py: Python<'py>,
        sender: &str,
        receiver: &str,
        amount: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        if sender == receiver {
            return Err(PyValueError::new_err("sender and receiver must differ"));
        }
        let mut from = self
            .wallets
            .remove(sender)
            .ok_or_else(|| PyKeyError::new_err(format!("no wallet named {sender:?}")))?;
        let Some(mut to) = self.wallets.remove(receiver) else {
            self.wallets.insert(sender.to_string(), from);
            return Err(PyKeyError::new_err(format!("no wallet named {receiver:?}")));
        };
        let now = self.register.clock;
        let result = wallet::pay(&mut from, &mut to, amount, &mut self.register, now);
        self.wallets.insert(sender.to_string(), from);
        self.wallets.insert(receiver.to_string(), to);
        let outcome = result.map_err(value_err)?;
        let dict = PyDict::new(py);
        dict.set_item("case", outcome.case.name())?;
        dict.set_item("version", outcome.selected_version)?;
        dict.set_item("amount", outcome.amount)?;
        dict.set_item("transfer_digest", hex::encode(outcome.transfer_digest))?;
        dict.set_item("deferred", outcome.deferred)?;
        dict.set_item("settled", outcome.receipt.is_some())?;
        Ok(dict)
    }

    /// Convert a wallet's old-version holdings to the current version.
    #[pyo3(signature = (name, force=false))]
    fn upgrade<'py>(
        &mut self,
        py: Python<'py>,
        name: &str,
        force: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let now = self.register.clock;
        let register = &mut self.register;
        let wallet = self
            .wallets
            .get_mut(name)
            .ok_or_else(|| PyKeyError::new_err(format!("no wallet named {name:?}")))?;
        let report = wallet
            .upgrade_holdings(register, now, force)
            .map_err(value_err)?;
        let converted = PyList::empty(py);
        for item in &report.converted {
            let row = PyDict::new(py);
            row.set_item("old_id", hex::encode(item.old_id))?;
            row.set_item("new_id", hex::encode(item.new_id))?;
            row.set_item("value", item.value)?;
            converted.append(row)?;
        }
        let dict = PyDict::new(py);
        dict.set_item("converted", converted)?;
        dict.set_item("failures", report.failures.clone())?;
        Ok(dict)
    }

    /// Push deferred offline payments to the register.
    fn upload<'py>(&mut self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyList>> {
        let now = self.register.clock;
        let register = &mut self.register;
        let wallet = self
            .wallets
            .get_mut(name)
            .ok_or_else(|| PyKeyError::new_err(format!("no wallet named {name:?}")))?;
        let outcomes = wallet.upload_deferred(register, now);
        let out = PyList::empty(py);
        for outcome in &outcomes {
            let row = PyDict::new(py);
            match outcome {
                UploadOutcome::Settled { digest, .. } => {
                    row.set_item("digest", hex::encode(digest))?;
                    row.set_item("status", "settled")?;
                }
                UploadOutcome::AlreadySettled { digest } => {
                    row.set_item("digest", hex::encode(digest))?;
                    row.set_item("status", "already-settled")?;
                }
                UploadOutcome::Failed {
                    digest,
                    error_code,
                    lost_value,
                    ..
                } => {
                    row.set_item("digest", hex::encode(digest))?;
                    row.set_item("status", "failed")?;
                    row.set_item("error_code", error_code.as_str())?;
                    row.set_item("lost_value", *lost_value)?;
                }
            }
            out.append(row)?;
        }
        Ok(out)
    }

    /// Set a wallet online or offline.
    fn set_online(&mut self, name: &str, online: bool) -> PyResult<()> {
        self.wallet_mut(name)?.profile.online = online;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Lab(clock={}, wallets={}, live_value={})",
            self.register.clock,
            self.wallets.len(),
            self.register.live_value()
        )
    }
}

#[pymodule]
pub fn pqcbdc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Key>()?;
    m.add_class::<Lab>()?;
    m.add_class::<SimResult>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_sign, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_verify, m)?)?;
    m.add_function(wrap_pyfunction!(domain_hash, m)?)?;
    m.add_function(wrap_pyfunction!(scheme_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
