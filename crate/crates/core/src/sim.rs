//! Deterministic discrete-event simulation: a wallet population exchanging
//! tokens while the system migrates from classical to post-quantum
//! signatures, raced by an attacker who derives private keys from every
//! classical public key the register ever sees.
//!
//! Each tick runs six phases in a fixed order: attacker forges, due
//! settlements, deferred uploads, fresh workload, wallet adoption, and
//! deadline-driven conversions, then a metrics row is appended. The attacker
//! goes first within a tick, which is the worst case for everyone else. All
//! randomness comes from one seeded generator, so a config reproduces its
//! run byte for byte.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, hash::digest_parts, hash::DomainTag, serde_hex, Drbg, KeyPair, SchemeConfig, SchemeId,
};
use crate::pki::CertificateAuthority;
use crate::register::{
    Addr, RegisterConfig, RegisterState, Token, TransferInput, TransferOutput, TransferRequest, V1,
};
use crate::wallet::{
    self, Generation, MatrixCase, PreparedPayment, RotationPolicy, UploadOutcome, WalletKind,
    WalletProfile, WalletState,
};
use crate::Tick;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("CONFIG_INVALID: {}", .0.join("; "))]
    ConfigInvalid(Vec<String>),
    #[error("EMPTY_SERIES: no metrics rows to report")]
    EmptySeries,
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::ConfigInvalid(_) => "CONFIG_INVALID",
            SimError::EmptySeries => "EMPTY_SERIES",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AmountDistribution {
    #[serde(rename = "uniform")]
    Uniform { min: u64, max: u64 },
}

impl AmountDistribution {
    fn draw(&self, rng: &mut Drbg) -> u64 {
        match *self {
            AmountDistribution::Uniform { min, max } => min + rng.gen_range(max - min + 1),
        }
    }
}

fn default_genesis_value() -> u64 {
    10_000
}
fn default_hardware_online_period() -> u64 {
    10
}
fn default_register_tree_height() -> u32 {
    15
}
fn default_never_upgrade_fraction() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(with = "serde_hex::arr32")]
    pub seed: [u8; 32],
    pub n_wallets: usize,
    /// Share of wallets that are hardware devices (offline most of the time).
    pub hardware_fraction: f64,
    /// Share of wallets that start out new-generation (v1+v2 capable).
    pub initial_new_fraction: f64,
    /// Old wallets replaced by new ones per tick; fractional rates accumulate.
    pub adoption_rate: f64,
    pub tx_per_tick: u32,
    pub amount_distribution: AmountDistribution,
    /// Share of wallets that keep one long-lived classical address instead
    /// of rotating.
    pub reuse_fraction: f64,
    /// Ticks between submission and settlement of an honest transfer.
    pub finality_delay: u64,
    /// Ticks the attacker needs to derive a private key from a public key
    /// seen on the wire. Absent = no attacker exists.
    pub attacker_break_delay: Option<u64>,
    /// Tick at which the attacker's machine comes online. Keys revealed
    /// earlier are still in its transcript; they start breaking from here.
    #[serde(default)]
    pub attacker_start_tick: Tick,
    pub v2_activation: Tick,
    pub soft_deadline: Tick,
    pub hard_deadline: Tick,
    pub downgrade_allowed: bool,
    pub total_ticks: u64,
    /// Value of the one token each wallet starts with, in cents.
    #[serde(default = "default_genesis_value")]
    pub genesis_value: u64,
    /// A hardware wallet with index i is reachable on ticks where
    /// (tick + i) % period == 0.
    #[serde(default = "default_hardware_online_period")]
    pub hardware_online_period: u64,
    #[serde(default = "default_register_tree_height")]
    pub register_tree_height: u32,
    /// Share of wallets that never adopt the new generation.
    #[serde(default = "default_never_upgrade_fraction")]
    pub never_upgrade_fraction: f64,
}

/// Identity-tree height for the certificate authority: capacity bounds how
/// many wallets can ever be onboarded or re-certified in one run.
const CA_TREE_HEIGHT: u32 = 10;

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        let frac = |name: &str, v: f64, problems: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must be in [0,1], got {v}"));
            }
        };
        if !(2..=400).contains(&self.n_wallets) {
            problems.push(format!(
                "n_wallets must be in [2,400], got {}",
                self.n_wallets
            ));
        }
        frac("hardware_fraction", self.hardware_fraction, &mut problems);
        frac(
            "initial_new_fraction",
            self.initial_new_fraction,
            &mut problems,
        );
        frac("reuse_fraction", self.reuse_fraction, &mut problems);
        frac(
            "never_upgrade_fraction",
            self.never_upgrade_fraction,
            &mut problems,
        );
        if !self.adoption_rate.is_finite() || self.adoption_rate < 0.0 {
            problems.push(format!(
                "adoption_rate must be >= 0, got {}",
                self.adoption_rate
            ));
        }
        let AmountDistribution::Uniform { min, max } = self.amount_distribution;
        if min == 0 {
            problems.push("amount_distribution min must be at least 1 cent".into());
        }
        if min > max {
            problems.push(format!("amount_distribution min {min} exceeds max {max}"));
        }
        if !(self.v2_activation <= self.soft_deadline && self.soft_deadline <= self.hard_deadline) {
            problems.push(format!(
                "deadlines must satisfy v2_activation <= soft_deadline <= hard_deadline, got {} / {} / {}",
                self.v2_activation, self.soft_deadline, self.hard_deadline
            ));
        }
        if self.total_ticks == 0 {
            problems.push("total_ticks must be at least 1".into());
        }
        if self.genesis_value == 0 {
            problems.push("genesis_value must be at least 1 cent".into());
        }
        if self.hardware_online_period == 0 {
            problems.push("hardware_online_period must be at least 1".into());
        }
        if !(1..=16).contains(&self.register_tree_height) {
            problems.push(format!(
                "register_tree_height must be in [1,16], got {}",
                self.register_tree_height
            ));
        }
        // Identity-tree capacity: every onboarding and every adoption
        // reissue costs the authority one leaf.
        let reissues = (self.adoption_rate * self.total_ticks as f64).ceil() as u64;
        let identity_demand = self.n_wallets as u64 + reissues.min(self.n_wallets as u64);
        if identity_demand > (1u64 << CA_TREE_HEIGHT) - 8 {
            problems.push(format!(
                "wallet population plus adoption reissues ({identity_demand}) exceeds identity tree capacity"
            ));
        }
        // Receipt-tree capacity: each settled transfer costs one leaf per
        // output plus one for the receipt; conversions and attacker forges
        // cost the same. Generous upper bound against the configured height.
        if (1..=16).contains(&self.register_tree_height) {
            let receipt_demand = self.n_wallets as u64
                + 3 * self.total_ticks * self.tx_per_tick as u64
                + 6 * self.n_wallets as u64
                + 128;
            if receipt_demand > 1u64 << self.register_tree_height {
                problems.push(format!(
                    "register_tree_height {} cannot cover the configured workload (needs roughly {} leaves)",
                    self.register_tree_height, receipt_demand
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::ConfigInvalid(problems))
        }
    }
}

/// One metrics row per tick. Field order here is the column order of every
/// report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tick: Tick,
    /// Honestly held version-1 value (attacker holdings excluded).
    pub live_v1_value: u64,
    pub live_v2_value: u64,
    pub tx_1a: u64,
    pub tx_2a: u64,
    pub tx_3a: u64,
    pub tx_3b: u64,
    pub tx_4a: u64,
    pub tx_4b: u64,
    pub fail_insufficient_funds: u64,
    pub fail_no_common_version: u64,
    pub fail_downgrade_required: u64,
    pub fail_double_spend: u64,
    pub fail_version_expired: u64,
    pub fail_other: u64,
    /// Cumulative value moved to the attacker's address.
    pub thefts_value: u64,
    /// Honest v1 value that can no longer migrate (zero until the hard
    /// deadline passes).
    pub stranded_value: u64,
}

impl MetricsRow {
    fn zeroed(tick: Tick) -> MetricsRow {
        MetricsRow {
            tick,
            live_v1_value: 0,
            live_v2_value: 0,
            tx_1a: 0,
            tx_2a: 0,
            tx_3a: 0,
            tx_3b: 0,
            tx_4a: 0,
            tx_4b: 0,
            fail_insufficient_funds: 0,
            fail_no_common_version: 0,
            fail_downgrade_required: 0,
            fail_double_spend: 0,
            fail_version_expired: 0,
            fail_other: 0,
            thefts_value: 0,
            stranded_value: 0,
        }
    }

    fn count_case(&mut self, case: MatrixCase) {
        match case {
            MatrixCase::C1a => self.tx_1a += 1,
            MatrixCase::C2a => self.tx_2a += 1,
            MatrixCase::C3a => self.tx_3a += 1,
            MatrixCase::C3b => self.tx_3b += 1,
            MatrixCase::C4a => self.tx_4a += 1,
            MatrixCase::C4b => self.tx_4b += 1,
        }
    }

    fn count_failure(&mut self, code: &str) {
        match code {
            "INSUFFICIENT_FUNDS" => self.fail_insufficient_funds += 1,
            "NO_COMMON_VERSION" => self.fail_no_common_version += 1,
            "DOWNGRADE_REQUIRED" => self.fail_downgrade_required += 1,
            "DOUBLE_SPEND" => self.fail_double_spend += 1,
            "TOKEN_VERSION_EXPIRED" => self.fail_version_expired += 1,
            _ => self.fail_other += 1,
        }
    }

    pub fn tx_total(&self) -> u64 {
        self.tx_1a + self.tx_2a + self.tx_3a + self.tx_3b + self.tx_4a + self.tx_4b
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSeries {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

/// Render a metrics series. Columns follow MetricsRow field order; all
/// values are plain integers.
pub fn report(series: &MetricsSeries, format: ReportFormat) -> Result<String, SimError> {
    if series.rows.is_empty() {
        return Err(SimError::EmptySeries);
    }
    match format {
        ReportFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            for row in &series.rows {
                wtr.serialize(row).expect("metrics rows serialize to csv");
            }
            let bytes = wtr.into_inner().expect("csv buffer");
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Json => {
            let mut out =
                serde_json::to_string_pretty(&series.rows).expect("metrics rows serialize");
            out.push('\n');
            Ok(out)
        }
    }
}

struct PendingBreak {
    key: KeyPair,
    addr: Addr,
    break_tick: Tick,
}

/// The quantum adversary. It watches every transfer submission, queues each
/// classical public key for derivation, and once a key is broken it sweeps
/// whatever value sits at (or later lands on) the matching address.
pub struct AttackerState {
    break_delay: u64,
    start_tick: Tick,
    pub attacker_addr: Addr,
    pending: Vec<PendingBreak>,
    /// Broken keys by address. In reality these privates come out of Shor's
    /// algorithm; the simulation hands over clones of the victims' keys,
    /// which is the same thing with the physics removed.
    broken: BTreeMap<Addr, KeyPair>,
    known: BTreeSet<Addr>,
    pub stolen_value: u64,
}

impl AttackerState {
    pub fn new(break_delay: u64, start_tick: Tick) -> AttackerState {
        AttackerState {
            break_delay,
            start_tick,
            attacker_addr: digest_parts(DomainTag::Addr, &[b"quantum-attacker"]),
            pending: Vec::new(),
            broken: BTreeMap::new(),
            known: BTreeSet::new(),
            stolen_value: 0,
        }
    }

    /// Record the classical keys a submission just exposed. Derivation
    /// finishes `break_delay` ticks later, but never before the attacker's
    /// machine exists.
    pub fn observe(&mut self, revealed: &[KeyPair], now: Tick) {
        for key in revealed {
            if key.scheme != SchemeId::ClassicalSchnorr {
                continue;
            }
            let addr = key.public_key().addr();
            if self.known.insert(addr) {
                self.pending.push(PendingBreak {
                    key: key.clone(),
                    addr,
                    break_tick: now.max(self.start_tick) + self.break_delay,
                });
            }
        }
    }

    /// Every address whose classical key the attacker has seen (broken or
    /// still in the derivation queue). Value sitting at these addresses is
    /// at risk even before it is stolen.
    pub fn revealed_addrs(&self) -> impl Iterator<Item = &Addr> {
        self.known.iter()
    }

    fn collect_due(&mut self, now: Tick) {
        let mut rest = Vec::with_capacity(self.pending.len());
        for entry in self.pending.drain(..) {
            if entry.break_tick <= now {
                self.broken.insert(entry.addr, entry.key);
            } else {
                rest.push(entry);
            }
        }
        self.pending = rest;
    }

    /// Sweep every live v1 token sitting at a broken address into the
    /// attacker's own address. Returns the value stolen this tick.
    fn forge(&mut self, register: &mut RegisterState, now: Tick) -> u64 {
        self.collect_due(now);
        if self.broken.is_empty() || !register.supported_versions_at(now).contains(&V1) {
            // After the hard deadline v1 is frozen: not even the attacker
            // can move it, and v2 keys never break.
            return 0;
        }
        let mut loot: BTreeMap<Addr, Vec<Token>> = BTreeMap::new();
        for token in register.live.values() {
            if token.version == V1 && self.broken.contains_key(&token.owner_addr) {
                loot.entry(token.owner_addr)
                    .or_default()
                    .push(token.clone());
            }
        }
        let cfg = register.config.scheme.clone();
        let mut stolen_now = 0;
        for (addr, tokens) in loot {
            let key = self.broken.get(&addr).expect("loot keyed by broken addr");
            let total: u64 = tokens.iter().map(|t| t.value).sum();
            let mut request = TransferRequest {
                inputs: tokens
                    .iter()
                    .map(|t| TransferInput {
                        token_id: t.token_id,
                        owner_pub: key.public_key(),
                        signature: crypto::Signature {
                            scheme: key.scheme,
                            payload: Vec::new(),
                            leaf_index: None,
                        },
                    })
                    .collect(),
                outputs: vec![TransferOutput {
                    value: total,
                    owner_addr: self.attacker_addr,
                    version: V1,
                }],
            };
            let bytes = request.signing_bytes();
            let mut signing_key = key.clone();
            let sig = crypto::sign(&cfg, &mut signing_key, &bytes).expect("classical signing");
            for input in &mut request.inputs {
                input.signature = sig.clone();
            }
            if register.validate_transfer(&request, now).is_ok() {
                stolen_now += total;
            }
        }
        self.stolen_value += stolen_now;
        stolen_now
    }
}

/// An honest transfer submitted but not yet final.
pub struct PendingTransfer {
    pub prepared: PreparedPayment,
    pub sender: usize,
    pub receiver: usize,
    pub submit_tick: Tick,
    pub settle_tick: Tick,
}

pub struct World {
    pub config: ScenarioConfig,
    pub register: RegisterState,
    pub issuer: CertificateAuthority,
    pub wallets: Vec<WalletState>,
    never_upgrade: Vec<bool>,
    pub attacker: Option<AttackerState>,
    pub pending: Vec<PendingTransfer>,
    /// Offline records by digest: the matrix case to book once the register
    /// accepts them, and the keys their upload will expose.
    deferred_meta: BTreeMap<[u8; 32], (MatrixCase, Vec<KeyPair>)>,
    adoption_acc: f64,
    cert_horizon: Tick,
    pub tick: Tick,
    rng: Drbg,
    pub series: MetricsSeries,
}

impl World {
    pub fn genesis(config: &ScenarioConfig) -> Result<World, SimError> {
        config.validate()?;
        let mut master = Drbg::new(config.seed);
        let mut register_rng = master.fork(b"register");
        let mut issuer_rng = master.fork(b"issuer");
        let mut wallet_rng = master.fork(b"wallets");
        let workload_rng = master.fork(b"workload");

        let scheme = SchemeConfig::default();
        let register = RegisterState::new(
            RegisterConfig {
                scheme: scheme.clone(),
                receipt_tree_height: config.register_tree_height,
                value_scale: 2,
                downgrade_allowed: config.downgrade_allowed,
                v2_activation: config.v2_activation,
                soft_deadline: config.soft_deadline,
                hard_deadline: config.hard_deadline,
            },
            &mut register_rng,
        )
        .expect("validated config builds a register");

        let cert_horizon = config.total_ticks.max(config.hard_deadline) + 1_000;
        let ca_classical = crypto::keygen(&scheme, SchemeId::ClassicalSchnorr, &mut issuer_rng)
            .expect("classical keygen");
        let ca_pq =
            crypto::keygen_with_height(&scheme, SchemeId::PqMss, CA_TREE_HEIGHT, &mut issuer_rng)
                .expect("authority keygen");
        let issuer = CertificateAuthority::new_root(
            "issuing-authority",
            Some(ca_classical),
            Some(ca_pq),
            0,
            cert_horizon,
            scheme,
        )
        .expect("root authority");

        let mut world = World {
            config: config.clone(),
            register,
            issuer,
            wallets: Vec::with_capacity(config.n_wallets),
            never_upgrade: Vec::with_capacity(config.n_wallets),
            attacker: config
                .attacker_break_delay
                .map(|d| AttackerState::new(d, config.attacker_start_tick)),
            pending: Vec::new(),
            deferred_meta: BTreeMap::new(),
            adoption_acc: 0.0,
            cert_horizon,
            tick: 0,
            rng: workload_rng,
            series: MetricsSeries::default(),
        };

        let register_pub = world.register.register_public();
        for idx in 0..config.n_wallets {
            let kind = if wallet_rng.gen_bool(config.hardware_fraction) {
                WalletKind::Hardware
            } else {
                WalletKind::Software
            };
            let generation = if wallet_rng.gen_bool(config.initial_new_fraction) {
                Generation::New
            } else {
                Generation::Old
            };
            let rotation = if wallet_rng.gen_bool(config.reuse_fraction) {
                RotationPolicy::ReuseAddress
            } else {
                RotationPolicy::FreshAddress
            };
            world
                .never_upgrade
                .push(wallet_rng.gen_bool(config.never_upgrade_fraction));
            let mut w = wallet::create_wallet(
                WalletProfile {
                    kind,
                    generation,
                    online: true,
                },
                rotation,
                &mut world.issuer,
                0,
                cert_horizon,
                &mut wallet_rng,
            )
            .expect("onboarding stays within authority capacity");
            let addr = w
                .provide_receiving_addr(V1)
                .expect("every wallet accepts v1 at genesis");
            let token = world
                .register
                .mint(config.genesis_value, addr, V1)
                .expect("genesis minting");
            w.receive_minted(token, &register_pub)
                .expect("genesis token accepted");
            w.profile.online = online_at(kind, idx, 0, config.hardware_online_period);
            world.wallets.push(w);
        }
        Ok(world)
    }

    /// Advance one tick with a randomly drawn workload.
    pub fn step(&mut self) {
        let mut picks = Vec::with_capacity(self.config.tx_per_tick as usize);
        let n = self.wallets.len();
        for _ in 0..self.config.tx_per_tick {
            let sender = self.rng.gen_range(n as u64) as usize;
            let shifted = self.rng.gen_range(n as u64 - 1) as usize;
            let receiver = if shifted >= sender {
                shifted + 1
            } else {
                shifted
            };
            let amount = self.config.amount_distribution.draw(&mut self.rng);
            picks.push((sender, receiver, amount));
        }
        self.step_with(picks);
    }

    /// Advance one tick with an explicit payment script (used by tests and
    /// hand-computed scenarios).
    pub fn step_with(&mut self, payments: Vec<(usize, usize, u64)>) {
        self.tick += 1;
        let t = self.tick;
        self.register.advance_clock(t);
        let mut row = MetricsRow::zeroed(t);

        // Phase 0: connectivity. Software is always reachable; hardware
        // follows its duty cycle.
        for (idx, w) in self.wallets.iter_mut().enumerate() {
            w.profile.online =
                online_at(w.profile.kind, idx, t, self.config.hardware_online_period);
        }

        // Phase 1: the attacker moves first.
        if let Some(att) = self.attacker.as_mut() {
            att.forge(&mut self.register, t);
        }

        // Phase 2: honest transfers whose finality delay has elapsed.
        let due: Vec<PendingTransfer> = {
            let mut due = Vec::new();
            let mut rest = Vec::new();
            for p in self.pending.drain(..) {
                if p.settle_tick <= t {
                    due.push(p);
                } else {
                    rest.push(p);
                }
            }
            self.pending = rest;
            due
        };
        for p in due {
            let (sw, rw) = two_mut(&mut self.wallets, p.sender, p.receiver);
            settle_now(&mut row, sw, rw, &p.prepared, &mut self.register, t);
        }

        // Phase 3: online wallets push their offline backlogs.
        for idx in 0..self.wallets.len() {
            if self.wallets[idx].profile.online && !self.wallets[idx].deferred.is_empty() {
                let outcomes = self.wallets[idx].upload_deferred(&mut self.register, t);
                consume_upload_outcomes(
                    &mut row,
                    &outcomes,
                    &mut self.deferred_meta,
                    self.attacker.as_mut(),
                    t,
                );
            }
        }

        // Phase 4: new workload.
        for (sender, receiver, amount) in payments {
            self.submit_payment(&mut row, sender, receiver, amount, t);
        }

        // Phase 5: adoption replaces old wallets with new ones (same
        // identifier, fresh hybrid certificate).
        self.adoption_acc += self.config.adoption_rate;
        let replacements = self.adoption_acc.floor() as u64;
        self.adoption_acc -= replacements as f64;
        let mut candidates: Vec<usize> = (0..self.wallets.len())
            .filter(|&i| {
                self.wallets[i].profile.generation == Generation::Old && !self.never_upgrade[i]
            })
            .collect();
        for _ in 0..replacements {
            if candidates.is_empty() {
                break;
            }
            let pick = self.rng.gen_range(candidates.len() as u64) as usize;
            let idx = candidates.swap_remove(pick);
            self.wallets[idx]
                .upgrade_generation(&mut self.issuer, t, self.cert_horizon)
                .expect("adoption stays within authority capacity");
        }

        // Phase 6: deadline sweep. Software wallets convert once the soft
        // deadline arrives; hardware wallets never do so on their own.
        if t >= self.config.soft_deadline {
            for idx in 0..self.wallets.len() {
                let report = self.wallets[idx]
                    .upgrade_holdings(&mut self.register, t, false)
                    .expect("conversion sweep");
                for failure in &report.failures {
                    let code = failure.split(':').next().unwrap_or("");
                    row.count_failure(code);
                }
                // Conversions are submissions: their classical input keys
                // went over the wire like any payment's.
                if let Some(att) = self.attacker.as_mut() {
                    att.observe(&report.revealed, t);
                }
            }
        }

        // Metrics row.
        let (reg_v1, reg_v2) = self.register.live_value_by_version();
        let attacker_held = self
            .attacker
            .as_ref()
            .map(|a| self.register.balance_of(&a.attacker_addr))
            .unwrap_or(0);
        row.live_v1_value = reg_v1 - attacker_held;
        row.live_v2_value = reg_v2;
        row.thefts_value = self.attacker.as_ref().map(|a| a.stolen_value).unwrap_or(0);
        row.stranded_value = if t > self.config.hard_deadline {
            row.live_v1_value
        } else {
            0
        };
        debug_assert_eq!(
            row.live_v1_value + row.live_v2_value + attacker_held,
            self.register.total_minted,
            "conservation: honest live plus attacker holdings equals minted value"
        );
        self.series.rows.push(row);
    }

    fn submit_payment(
        &mut self,
        row: &mut MetricsRow,
        sender: usize,
        receiver: usize,
        amount: u64,
        t: Tick,
    ) {
        let (sw, rw) = two_mut(&mut self.wallets, sender, receiver);
        let prepared = match wallet::prepare_payment(sw, rw, amount, &self.register, t) {
            Ok(p) => p,
            Err(e) => {
                row.count_failure(e.code());
                return;
            }
        };
        if sw.profile.online || rw.profile.online {
            // Reaching the register means the sender's backlog goes first:
            // this payment may spend outputs those records create.
            if !sw.deferred.is_empty() {
                let outcomes = sw.upload_deferred(&mut self.register, t);
                consume_upload_outcomes(
                    row,
                    &outcomes,
                    &mut self.deferred_meta,
                    self.attacker.as_mut(),
                    t,
                );
            }
            if let Some(att) = self.attacker.as_mut() {
                att.observe(&prepared.revealed, t);
            }
            if self.config.finality_delay == 0 {
                settle_now(row, sw, rw, &prepared, &mut self.register, t);
            } else {
                self.pending.push(PendingTransfer {
                    prepared,
                    sender,
                    receiver,
                    submit_tick: t,
                    settle_tick: t + self.config.finality_delay,
                });
            }
        } else {
            // Nobody can reach the register: bilateral settlement. The keys
            // in this request stay hidden until some copy gets uploaded.
            let digest = prepared.request.digest();
            wallet::settle_offline(sw, rw, &prepared, t).expect("bilateral settlement");
            self.deferred_meta
                .insert(digest, (prepared.case, prepared.revealed.clone()));
        }
    }

    /// Final honest value held by a predicate-selected subset of wallets,
    /// as the register sees it.
    pub fn held_by<F: Fn(usize, &WalletState) -> bool>(&self, pred: F) -> u64 {
        self.wallets
            .iter()
            .enumerate()
            .filter(|(i, w)| pred(*i, w))
            .map(|(_, w)| w.settled_balance())
            .sum()
    }

    pub fn never_upgrade_flags(&self) -> &[bool] {
        &self.never_upgrade
    }
}

fn online_at(kind: WalletKind, idx: usize, tick: Tick, period: u64) -> bool {
    match kind {
        WalletKind::Software => true,
        WalletKind::Hardware => (tick + idx as u64).is_multiple_of(period),
    }
}

fn settle_now(
    row: &mut MetricsRow,
    sender: &mut WalletState,
    receiver: &mut WalletState,
    prepared: &PreparedPayment,
    register: &mut RegisterState,
    t: Tick,
) {
    match register.validate_transfer(&prepared.request, t) {
        Ok(receipt) => {
            wallet::deliver_settled(sender, receiver, prepared, &receipt, register)
                .expect("settled payment delivery: keys were staged at preparation");
            row.count_case(prepared.case);
        }
        Err(e) => {
            row.count_failure(e.code());
            // Whatever the register still considers live goes back into the
            // sender's pocket; inputs the attacker raced away are gone.
            for holding in &prepared.consumed {
                if register.live.contains_key(&holding.token.token_id) {
                    sender.holdings.push(holding.clone());
                }
            }
        }
    }
}

fn consume_upload_outcomes(
    row: &mut MetricsRow,
    outcomes: &[UploadOutcome],
    deferred_meta: &mut BTreeMap<[u8; 32], (MatrixCase, Vec<KeyPair>)>,
    mut attacker: Option<&mut AttackerState>,
    t: Tick,
) {
    for outcome in outcomes {
        match outcome {
            UploadOutcome::Settled { digest, .. } => {
                if let Some((case, revealed)) = deferred_meta.remove(digest) {
                    row.count_case(case);
                    if let Some(att) = attacker.as_deref_mut() {
                        att.observe(&revealed, t);
                    }
                }
            }
            UploadOutcome::AlreadySettled { digest } => {
                deferred_meta.remove(digest);
            }
            UploadOutcome::Failed {
                digest, error_code, ..
            } => {
                row.count_failure(error_code);
                if let Some((_, revealed)) = deferred_meta.remove(digest) {
                    // A rejected submission still showed the keys to the
                    // network.
                    if let Some(att) = attacker.as_deref_mut() {
                        att.observe(&revealed, t);
                    }
                }
            }
        }
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b, "a payment needs two distinct wallets");
    if a < b {
        let (left, right) = v.split_at_mut(b);
        (&mut left[a], &mut right[0])
    } else {
        let (left, right) = v.split_at_mut(a);
        (&mut right[0], &mut left[b])
    }
}

/// Run a scenario start to finish. Identical configs produce identical
/// worlds, metrics included.
pub fn run_scenario(config: &ScenarioConfig) -> Result<World, SimError> {
    let mut world = World::genesis(config)?;
    for _ in 0..config.total_ticks {
        world.step();
    }
    Ok(world)
}
