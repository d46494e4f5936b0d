//! `pqcbdc`: command-line bench for the token register, its wallets, and the
//! migration simulator. State lives in a lab directory as plain JSON; every
//! binary value crossing stdin/stdout/argv is hex.
//!
//! Exit codes: 0 success, 1 usage error (`E_USAGE` on stderr), 2 operation
//! error (`E_OP` on stderr).

mod lab;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use pqcbdc_core::crypto::{
    self, hash, scheme_sizes_with_height, Drbg, KeyPair, SchemeConfig, SchemeId, Signature,
    VerificationPolicy,
};
use pqcbdc_core::pki::{
    verify_chain, verify_linked_pair, Certificate, CertificateAuthority, LinkedCertPair, Role,
};
use pqcbdc_core::register::{
    Addr, RegisterConfig, RegisterState, TokenId, TransferInput, TransferOutput, TransferRequest,
    Version,
};
use pqcbdc_core::sim::{
    report, run_scenario, MetricsRow, MetricsSeries, ReportFormat, ScenarioConfig,
};
use pqcbdc_core::wallet::{
    create_wallet, pay, Generation, RotationPolicy, UploadOutcome, WalletKind, WalletProfile,
};
use pqcbdc_core::Tick;

use lab::Lab;

/// A failed command: usage errors exit 1, operation errors exit 2.
pub enum Failure {
    Usage(String),
    Op(String),
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "pqcbdc",
    version,
    about = "Desk-scale laboratory for crypto-agile token money",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a key pair and write it to a JSON file.
    Keygen(KeygenArgs),
    /// Certificate authority operations.
    #[command(subcommand)]
    Cert(CertCmd),
    /// Create new money on the lab register.
    Mint(MintArgs),
    /// Submit a raw transfer request to the lab register.
    Transfer(TransferArgs),
    /// Exchange one live token for an equal-value token of another version.
    Convert(ConvertArgs),
    /// Wallet operations against the lab register.
    #[command(subcommand)]
    Wallet(WalletCmd),
    /// Run a scenario from a config file and write its metrics report.
    Simulate(SimulateArgs),
    /// Re-render a stored metrics series.
    Report(ReportArgs),
    /// Print key and signature sizes per scheme.
    Sizes(SizesArgs),
}

#[derive(Args)]
struct KeygenArgs {
    /// classical-schnorr, pq-wots or pq-mss
    #[arg(long)]
    scheme: String,
    /// Merkle tree height for pq-mss keys
    #[arg(long)]
    mss_height: Option<u32>,
    /// 32-byte hex seed; omitted = drawn from the clock
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CertCmd {
    /// Create a self-signed root authority.
    Root(CertRootArgs),
    /// Issue a certificate from an existing authority.
    Issue(CertIssueArgs),
    /// Issue a linked PQ certificate bound to an existing classical one.
    Link(CertLinkArgs),
    /// Verify a chain (or a linked pair) against a trust root.
    Verify(CertVerifyArgs),
}

#[derive(Args)]
struct CertRootArgs {
    #[arg(long)]
    subject: String,
    /// Key file for the classical half
    #[arg(long)]
    classical_key: Option<PathBuf>,
    /// Key file for the post-quantum half
    #[arg(long)]
    pq_key: Option<PathBuf>,
    #[arg(long)]
    not_before: Tick,
    #[arg(long)]
    not_after: Tick,
    /// Where the authority (certificate plus private keys) is stored
    #[arg(long)]
    out_ca: PathBuf,
    /// Optionally also write the bare certificate
    #[arg(long)]
    out_cert: Option<PathBuf>,
}

#[derive(Args)]
struct CertIssueArgs {
    /// Authority file written by `cert root` (or a previous `cert issue`)
    #[arg(long)]
    ca: PathBuf,
    #[arg(long)]
    subject: String,
    /// sub-ca, wallet or register
    #[arg(long)]
    role: String,
    /// Subject's classical key file (public half is certified)
    #[arg(long)]
    classical_key: Option<PathBuf>,
    /// Subject's post-quantum key file (public half is certified)
    #[arg(long)]
    pq_key: Option<PathBuf>,
    #[arg(long)]
    not_before: Tick,
    #[arg(long)]
    not_after: Tick,
    #[arg(long)]
    out: PathBuf,
    /// Write the subject's own authority file too, so it can issue further
    #[arg(long)]
    out_ca: Option<PathBuf>,
}

#[derive(Args)]
struct CertLinkArgs {
    #[arg(long)]
    ca: PathBuf,
    /// The already-issued classical certificate
    #[arg(long)]
    classical_cert: PathBuf,
    /// Key file matching that certificate; it signs the binding proof
    #[arg(long)]
    classical_key: PathBuf,
    /// Post-quantum key file whose public half the new certificate carries
    #[arg(long)]
    pq_key: PathBuf,
    #[arg(long)]
    not_before: Tick,
    #[arg(long)]
    not_after: Tick,
    /// Where the linked pair is written
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CertVerifyArgs {
    /// Leaf-first certificate files, comma separated
    #[arg(long, value_delimiter = ',')]
    chain: Vec<PathBuf>,
    /// Linked pair file (alternative to --chain)
    #[arg(long)]
    pair: Option<PathBuf>,
    /// Issuer-first suffix for --pair, comma separated
    #[arg(long, value_delimiter = ',')]
    issuer_chain: Vec<PathBuf>,
    /// Trust root certificate file
    #[arg(long)]
    root: PathBuf,
    /// classical-only, pq-only, both or either
    #[arg(long)]
    policy: String,
    #[arg(long)]
    at_tick: Tick,
}

#[derive(Args)]
struct LabArg {
    /// Lab directory holding register, authority and wallet state
    #[arg(long, default_value = "pqcbdc-lab")]
    lab: PathBuf,
}

#[derive(Args)]
struct MintArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    value: u64,
    #[arg(long, default_value_t = 1)]
    version: Version,
    /// Mint into a named lab wallet
    #[arg(long, conflicts_with = "owner_addr")]
    wallet: Option<String>,
    /// Or mint to a raw owner address (64 hex chars)
    #[arg(long)]
    owner_addr: Option<String>,
    #[arg(long)]
    at_tick: Option<Tick>,
    /// Register creation (first mint only): receipt tree height
    #[arg(long, default_value_t = 10)]
    init_tree_height: u32,
    /// Register creation: tick when version 2 becomes mintable
    #[arg(long, default_value_t = 100)]
    init_activation: Tick,
    /// Register creation: conversion-prompt deadline
    #[arg(long, default_value_t = 500)]
    init_soft_deadline: Tick,
    /// Register creation: last tick version-1 tokens are accepted
    #[arg(long, default_value_t = 1000)]
    init_hard_deadline: Tick,
    /// Register creation: allow version downgrades
    #[arg(long)]
    init_downgrade_allowed: bool,
    /// Register creation: 32-byte hex seed for the register key
    #[arg(long)]
    init_seed: Option<String>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    lab: LabArg,
    /// Transfer request JSON file
    #[arg(long)]
    request: PathBuf,
    #[arg(long)]
    at_tick: Option<Tick>,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    lab: LabArg,
    /// Live token to convert (32 hex chars)
    #[arg(long)]
    token_id: String,
    /// Key file owning that token; consumed state is written back
    #[arg(long)]
    owner_key: PathBuf,
    #[arg(long)]
    to_version: Version,
    /// New owner address (64 hex chars)
    #[arg(long, conflicts_with = "new_owner_key")]
    new_owner_addr: Option<String>,
    /// Or a key file whose address receives the new token
    #[arg(long)]
    new_owner_key: Option<PathBuf>,
    #[arg(long)]
    at_tick: Option<Tick>,
}

#[derive(Subcommand)]
enum WalletCmd {
    /// Create a wallet certified by the lab authority.
    Create(WalletCreateArgs),
    /// Hand out a fresh receiving address.
    Addr(WalletAddrArgs),
    /// Show balances and holdings.
    Balance(WalletNameArgs),
    /// Pay another lab wallet.
    Pay(WalletPayArgs),
    /// Upload deferred offline payments to the register.
    Upload(WalletTickArgs),
    /// Convert old-version holdings to the new version.
    Upgrade(WalletUpgradeArgs),
}

#[derive(Args)]
struct WalletCreateArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    name: String,
    /// old or new
    #[arg(long)]
    generation: String,
    /// software or hardware
    #[arg(long, default_value = "software")]
    kind: String,
    /// fresh-address or reuse-address
    #[arg(long, default_value = "fresh-address")]
    rotation: String,
    /// Create the wallet as offline (payments defer until upload)
    #[arg(long)]
    offline: bool,
    /// Authority file; defaults to ca.json inside the lab
    #[arg(long)]
    ca: Option<PathBuf>,
    /// Certificate validity start; defaults to the authority's own start
    #[arg(long)]
    not_before: Option<Tick>,
    /// Certificate validity end; defaults to the authority's own end
    #[arg(long)]
    not_after: Option<Tick>,
    /// 32-byte hex seed; omitted = drawn from the clock
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct WalletAddrArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 1)]
    version: Version,
}

#[derive(Args)]
struct WalletNameArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    name: String,
}

#[derive(Args)]
struct WalletPayArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    #[arg(long)]
    amount: u64,
    #[arg(long)]
    at_tick: Option<Tick>,
}

#[derive(Args)]
struct WalletTickArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    name: String,
    #[arg(long)]
    at_tick: Option<Tick>,
}

#[derive(Args)]
struct WalletUpgradeArgs {
    #[command(flatten)]
    lab: LabArg,
    #[arg(long)]
    name: String,
    /// Convert even before the soft deadline (and on hardware wallets)
    #[arg(long)]
    force: bool,
    #[arg(long)]
    at_tick: Option<Tick>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config JSON
    #[arg(long)]
    config: PathBuf,
    /// 32-byte hex seed overriding the config's seed
    #[arg(long)]
    seed: Option<String>,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the register's event log, one JSON object per line
    #[arg(long)]
    events_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics series as JSON (the `simulate --format json` output)
    #[arg(long)]
    input: PathBuf,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SizesArgs {
    /// One scheme; all four when omitted
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    mss_height: Option<u32>,
    /// Emit JSON instead of text lines
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("E_USAGE {}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("E_USAGE {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Op(msg)) => {
            eprintln!("E_OP {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Keygen(args) => cmd_keygen(args),
        Cmd::Cert(CertCmd::Root(args)) => cmd_cert_root(args),
        Cmd::Cert(CertCmd::Issue(args)) => cmd_cert_issue(args),
        Cmd::Cert(CertCmd::Link(args)) => cmd_cert_link(args),
        Cmd::Cert(CertCmd::Verify(args)) => cmd_cert_verify(args),
        Cmd::Mint(args) => cmd_mint(args),
        Cmd::Transfer(args) => cmd_transfer(args),
        Cmd::Convert(args) => cmd_convert(args),
        Cmd::Wallet(WalletCmd::Create(args)) => cmd_wallet_create(args),
        Cmd::Wallet(WalletCmd::Addr(args)) => cmd_wallet_addr(args),
        Cmd::Wallet(WalletCmd::Balance(args)) => cmd_wallet_balance(args),
        Cmd::Wallet(WalletCmd::Pay(args)) => cmd_wallet_pay(args),
        Cmd::Wallet(WalletCmd::Upload(args)) => cmd_wallet_upload(args),
        Cmd::Wallet(WalletCmd::Upgrade(args)) => cmd_wallet_upgrade(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Sizes(args) => cmd_sizes(args),
    }
}

// --------------------------------------------------------------------------
// argument parsing helpers
// --------------------------------------------------------------------------

fn parse_scheme(s: &str) -> Result<SchemeId, Failure> {
    SchemeId::parse(s).ok_or_else(|| {
        usage(format!(
            "unknown scheme {s:?}; expected classical-schnorr, pq-wots, pq-mss or hybrid-cm"
        ))
    })
}

fn parse_policy(s: &str) -> Result<VerificationPolicy, Failure> {
    VerificationPolicy::parse(s).ok_or_else(|| {
        usage(format!(
            "unknown policy {s:?}; expected classical-only, pq-only, both or either"
        ))
    })
}

fn parse_role(s: &str) -> Result<Role, Failure> {
    match s {
        "sub-ca" => Ok(Role::SubCa),
        "wallet" => Ok(Role::Wallet),
        "register" => Ok(Role::Register),
        other => Err(usage(format!(
            "unknown role {other:?}; expected sub-ca, wallet or register"
        ))),
    }
}

fn parse_hex_array<const N: usize>(what: &str, s: &str) -> Result<[u8; N], Failure> {
    let bytes = hex::decode(s).map_err(|_| usage(format!("{what} must be hex")))?;
    bytes
        .as_slice()
        .try_into()
        .map_err(|_| usage(format!("{what} must be {} hex chars", 2 * N)))
}

/// Seed for key material: the given hex, or entropy from the clock. Pass an
/// explicit seed whenever reproducibility matters.
fn seed_or_clock(seed: &Option<String>) -> Result<[u8; 32], Failure> {
    match seed {
        Some(s) => parse_hex_array::<32>("--seed", s),
        None => {
            let nanos = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .expect("clock runs forward")
                .as_nanos();
            let mut material = nanos.to_be_bytes().to_vec();
            material.extend(std::process::id().to_be_bytes());
            hash::hash(&material, "drbg").map_err(op)
        }
    }
}

fn load_key(path: &Path) -> Result<KeyPair, Failure> {
    lab::read_json(path)
}

/// Core errors render as "CODE: detail"; pass them through untouched so the
/// stderr line is `E_OP CODE: detail`.
fn op(err: impl std::fmt::Display) -> Failure {
    Failure::Op(err.to_string())
}

// --------------------------------------------------------------------------
// commands
// --------------------------------------------------------------------------

fn cmd_keygen(args: KeygenArgs) -> Result<(), Failure> {
    let scheme = parse_scheme(&args.scheme)?;
    let cfg = SchemeConfig::default();
    let mut rng = Drbg::new(seed_or_clock(&args.seed)?);
    let height = args.mss_height.unwrap_or(cfg.mss_height);
    let key = crypto::keygen_with_height(&cfg, scheme, height, &mut rng).map_err(op)?;
    let public = key.public_key();
    lab::write_json(&args.out, &key)?;
    println!("scheme: {}", scheme.name());
    println!("address: {}", hex::encode(public.addr()));
    if let Some(remaining) = key.remaining_signatures() {
        println!("signatures-remaining: {remaining}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_cert_root(args: CertRootArgs) -> Result<(), Failure> {
    let classical = args.classical_key.as_ref().map(|p| load_key(p)).transpose()?;
    let pq = args.pq_key.as_ref().map(|p| load_key(p)).transpose()?;
    let ca = CertificateAuthority::new_root(
        &args.subject,
        classical,
        pq,
        args.not_before,
        args.not_after,
        SchemeConfig::default(),
    )
    .map_err(op)?;
    lab::write_json(&args.out_ca, &ca)?;
    if let Some(out_cert) = &args.out_cert {
        lab::write_json(out_cert, &ca.cert)?;
    }
    println!("serial: {}", hex::encode(ca.cert.serial));
    println!("wrote {}", args.out_ca.display());
    Ok(())
}

fn cmd_cert_issue(args: CertIssueArgs) -> Result<(), Failure> {
    let mut ca: CertificateAuthority = lab::read_json(&args.ca)?;
    let role = parse_role(&args.role)?;
    let classical = args.classical_key.as_ref().map(|p| load_key(p)).transpose()?;
    let pq = args.pq_key.as_ref().map(|p| load_key(p)).transpose()?;
    let cert = ca
        .issue(
            &args.subject,
            role,
            classical.as_ref().map(KeyPair::public_key),
            pq.as_ref().map(KeyPair::public_key),
            args.not_before,
            args.not_after,
        )
        .map_err(op)?;
    lab::write_json(&args.out, &cert)?;
    // Issuing consumed a tree leaf; persist the authority's new state.
    lab::write_json(&args.ca, &ca)?;
    if let Some(out_ca) = &args.out_ca {
        let sub = CertificateAuthority::from_issued(cert.clone(), classical, pq, ca.cfg.clone());
        lab::write_json(out_ca, &sub)?;
    }
    println!("serial: {}", hex::encode(cert.serial));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_cert_link(args: CertLinkArgs) -> Result<(), Failure> {
    let mut ca: CertificateAuthority = lab::read_json(&args.ca)?;
    let classical_cert: Certificate = lab::read_json(&args.classical_cert)?;
    let mut classical_key = load_key(&args.classical_key)?;
    let pq_key = load_key(&args.pq_key)?;
    let pair = ca
        .issue_linked_pq(
            &classical_cert,
            &mut classical_key,
            pq_key.public_key(),
            args.not_before,
            args.not_after,
        )
        .map_err(op)?;
    lab::write_json(&args.out, &pair)?;
    lab::write_json(&args.ca, &ca)?;
    println!("pq-serial: {}", hex::encode(pair.pq_cert.serial));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_cert_verify(args: CertVerifyArgs) -> Result<(), Failure> {
    let policy = parse_policy(&args.policy)?;
    let cfg = SchemeConfig::default();
    let root: Certificate = lab::read_json(&args.root)?;
    let report = if let Some(pair_path) = &args.pair {
        let pair: LinkedCertPair = lab::read_json(pair_path)?;
        let issuer_chain: Vec<Certificate> = args
            .issuer_chain
            .iter()
            .map(|p| lab::read_json(p))
            .collect::<Result<_, _>>()?;
        verify_linked_pair(&cfg, &pair, &issuer_chain, &root, policy, args.at_tick)
    } else {
        if args.chain.is_empty() {
            return Err(usage("pass --chain or --pair".to_string()));
        }
        let chain: Vec<Certificate> = args
            .chain
            .iter()
            .map(|p| lab::read_json(p))
            .collect::<Result<_, _>>()?;
        verify_chain(&cfg, &chain, &root, policy, args.at_tick)
    };
    match report.failure {
        None => {
            println!("valid under {} at tick {}", policy.name(), args.at_tick);
            Ok(())
        }
        Some(failure) => Err(Failure::Op(format!(
            "{}: rejected under {} at tick {}",
            failure.code(),
            policy.name(),
            args.at_tick
        ))),
    }
}

fn cmd_mint(args: MintArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let mut created = false;
    let mut register = if lab.register_path().exists() {
        lab.load_register()?
    } else {
        let config = RegisterConfig {
            receipt_tree_height: args.init_tree_height,
            v2_activation: args.init_activation,
            soft_deadline: args.init_soft_deadline,
            hard_deadline: args.init_hard_deadline,
            downgrade_allowed: args.init_downgrade_allowed,
            ..RegisterConfig::default()
        };
        let mut rng = Drbg::new(seed_or_clock(&args.init_seed)?);
        created = true;
        RegisterState::new(config, &mut rng).map_err(op)?
    };
    if let Some(tick) = args.at_tick {
        register.advance_clock(tick);
    }

    let token = match (&args.wallet, &args.owner_addr) {
        (Some(name), None) => {
            let mut wallet = lab.load_wallet(name)?;
            let addr = wallet.provide_receiving_addr(args.version).map_err(op)?;
            let token = register.mint(args.value, addr, args.version).map_err(op)?;
            wallet
                .receive_minted(token.clone(), &register.register_public())
                .map_err(op)?;
            lab.save_wallet(name, &wallet)?;
            token
        }
        (None, Some(addr_hex)) => {
            let addr: Addr = parse_hex_array("--owner-addr", addr_hex)?;
            register.mint(args.value, addr, args.version).map_err(op)?
        }
        _ => {
            return Err(usage(
                "pass exactly one of --wallet or --owner-addr".to_string(),
            ))
        }
    };
    lab.save_register(&register)?;
    if created {
        println!("created register at {}", lab.register_path().display());
    }
    println!("token-id: {}", hex::encode(token.token_id));
    println!("version: {} value: {}", token.version, token.value);
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let mut register = lab.load_register()?;
    let request: TransferRequest = lab::read_json(&args.request)?;
    let now = args.at_tick.unwrap_or(register.clock);
    let receipt = register.validate_transfer(&request, now).map_err(op)?;
    lab.save_register(&register)?;
    println!("transfer-digest: {}", hex::encode(receipt.transfer_digest));
    for id in &receipt.new_token_ids {
        println!("new-token: {}", hex::encode(id.0));
    }
    println!("settled at tick {}", receipt.tick);
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let mut register = lab.load_register()?;
    let token_id: TokenId = parse_hex_array("--token-id", &args.token_id)?;
    let mut owner_key = load_key(&args.owner_key)?;
    let new_owner_addr: Addr = match (&args.new_owner_addr, &args.new_owner_key) {
        (Some(hex_addr), None) => parse_hex_array("--new-owner-addr", hex_addr)?,
        (None, Some(path)) => load_key(path)?.public_key().addr(),
        _ => {
            return Err(usage(
                "pass exactly one of --new-owner-addr or --new-owner-key".to_string(),
            ))
        }
    };
    let now = args.at_tick.unwrap_or(register.clock);

    let value = match register.live.get(&token_id) {
        Some(token) => token.value,
        None => {
            return Err(Failure::Op(
                "UNKNOWN_TOKEN: token is not live on the register".into(),
            ))
        }
    };
    // The conversion settles as a one-input/one-output transfer; sign the
    // request the register will reconstruct.
    let request = TransferRequest {
        inputs: vec![TransferInput {
            token_id,
            owner_pub: owner_key.public_key(),
            signature: Signature {
                scheme: owner_key.scheme,
                payload: Vec::new(),
                leaf_index: None,
            },
        }],
        outputs: vec![TransferOutput {
            value,
            owner_addr: new_owner_addr,
            version: args.to_version,
        }],
    };
    let bytes = request.signing_bytes();
    let signature = crypto::sign(&register.config.scheme, &mut owner_key, &bytes).map_err(op)?;
    // The one-time key state advanced; record that even if the register
    // rejects the conversion, because the signature is on the wire now.
    lab::write_json(&args.owner_key, &owner_key)?;
    let (token, receipt) = register
        .convert_version(
            token_id,
            owner_key.public_key(),
            signature,
            args.to_version,
            new_owner_addr,
            now,
        )
        .map_err(op)?;
    lab.save_register(&register)?;
    println!(
        "converted {} -> {}",
        hex::encode(token_id),
        hex::encode(token.token_id)
    );
    println!("version: {} value: {}", token.version, token.value);
    println!("settled at tick {}", receipt.tick);
    Ok(())
}

fn cmd_wallet_create(args: WalletCreateArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let generation = match args.generation.as_str() {
        "old" => Generation::Old,
        "new" => Generation::New,
        other => {
            return Err(usage(format!(
                "unknown generation {other:?}; expected old or new"
            )))
        }
    };
    let kind = match args.kind.as_str() {
        "software" => WalletKind::Software,
        "hardware" => WalletKind::Hardware,
        other => {
            return Err(usage(format!(
                "unknown kind {other:?}; expected software or hardware"
            )))
        }
    };
    let rotation = match args.rotation.as_str() {
        "fresh-address" => RotationPolicy::FreshAddress,
        "reuse-address" => RotationPolicy::ReuseAddress,
        other => Err(usage(format!(
            "unknown rotation {other:?}; expected fresh-address or reuse-address"
        )))?,
    };
    let (mut ca, ca_path) = lab.load_ca(args.ca.as_deref())?;
    let not_before = args.not_before.unwrap_or(ca.cert.not_before);
    let not_after = args.not_after.unwrap_or(ca.cert.not_after);
    let mut rng = Drbg::new(seed_or_clock(&args.seed)?);
    let wallet = create_wallet(
        WalletProfile {
            kind,
            generation,
            online: !args.offline,
        },
        rotation,
        &mut ca,
        not_before,
        not_after,
        &mut rng,
    )
    .map_err(op)?;
    lab.save_wallet(&args.name, &wallet)?;
    lab::write_json(&ca_path, &ca)?;
    println!("wallet-id: {}", hex::encode(wallet.wallet_id));
    println!("cert-serial: {}", hex::encode(wallet.cert.serial));
    println!("wrote {}", lab.wallet_path(&args.name)?.display());
    Ok(())
}

fn cmd_wallet_addr(args: WalletAddrArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let mut wallet = lab.load_wallet(&args.name)?;
    let addr = wallet.provide_receiving_addr(args.version).map_err(op)?;
    lab.save_wallet(&args.name, &wallet)?;
    println!("{}", hex::encode(addr));
    Ok(())
}

fn cmd_wallet_balance(args: WalletNameArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let wallet = lab.load_wallet(&args.name)?;
    println!("balance: {}", wallet.balance());
    println!("settled-balance: {}", wallet.settled_balance());
    for holding in &wallet.holdings {
        println!(
            "holding: {} v{} value {}{}",
            hex::encode(holding.token.token_id),
            holding.token.version,
            holding.token.value,
            if holding.is_provisional() {
                " (provisional)"
            } else {
                ""
            }
        );
    }
    println!("deferred-records: {}", wallet.deferred.len());
    Ok(())
}

fn cmd_wallet_pay(args: WalletPayArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    if args.from == args.to {
        return Err(usage(
            "--from and --to must name different wallets".to_string(),
        ));
    }
    let mut register = lab.load_register()?;
    let mut sender = lab.load_wallet(&args.from)?;
    let mut receiver = lab.load_wallet(&args.to)?;
    let now = args.at_tick.unwrap_or(register.clock);
    let outcome = pay(&mut sender, &mut receiver, args.amount, &mut register, now).map_err(op)?;
    lab.save_register(&register)?;
    lab.save_wallet(&args.from, &sender)?;
    lab.save_wallet(&args.to, &receiver)?;
    println!("case: {}", outcome.case.name());
    println!("version: {}", outcome.selected_version);
    println!("transfer-digest: {}", hex::encode(outcome.transfer_digest));
    if outcome.deferred {
        println!("deferred: both parties offline; upload later");
    } else {
        println!("settled at tick {now}");
    }
    for flushed in &outcome.flushed {
        print_upload_outcome(flushed);
    }
    Ok(())
}

fn print_upload_outcome(outcome: &UploadOutcome) {
    match outcome {
        UploadOutcome::Settled { digest, .. } => {
            println!("uploaded: {} settled", hex::encode(digest));
        }
        UploadOutcome::AlreadySettled { digest } => {
            println!(
                "uploaded: {} already settled by the counterparty",
                hex::encode(digest)
            );
        }
        UploadOutcome::Failed {
            digest,
            error_code,
            lost_value,
            ..
        } => {
            println!(
                "uploaded: {} failed ({error_code}); {lost_value} written off",
                hex::encode(digest)
            );
        }
    }
}

fn cmd_wallet_upload(args: WalletTickArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let mut register = lab.load_register()?;
    let mut wallet = lab.load_wallet(&args.name)?;
    let now = args.at_tick.unwrap_or(register.clock);
    let outcomes = wallet.upload_deferred(&mut register, now);
    lab.save_register(&register)?;
    lab.save_wallet(&args.name, &wallet)?;
    if outcomes.is_empty() {
        println!("nothing to upload");
    }
    for outcome in &outcomes {
        print_upload_outcome(outcome);
    }
    Ok(())
}

fn cmd_wallet_upgrade(args: WalletUpgradeArgs) -> Result<(), Failure> {
    let lab = Lab::new(&args.lab.lab);
    let mut register = lab.load_register()?;
    let mut wallet = lab.load_wallet(&args.name)?;
    let now = args.at_tick.unwrap_or(register.clock);
    let report = wallet
        .upgrade_holdings(&mut register, now, args.force)
        .map_err(op)?;
    lab.save_register(&register)?;
    lab.save_wallet(&args.name, &wallet)?;
    for converted in &report.converted {
        println!(
            "converted: {} -> {} value {}",
            hex::encode(converted.old_id),
            hex::encode(converted.new_id),
            converted.value
        );
    }
    for failure in &report.failures {
        println!("failed: {failure}");
    }
    if report.converted.is_empty() && report.failures.is_empty() {
        println!("nothing to convert");
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config: ScenarioConfig = lab::read_json(&args.config)?;
    if let Some(seed) = &args.seed {
        config.seed = parse_hex_array::<32>("--seed", seed)?;
    }
    let format = ReportFormat::parse(&args.format).ok_or_else(|| {
        usage(format!(
            "unknown format {:?}; expected csv or json",
            args.format
        ))
    })?;
    let world = run_scenario(&config).map_err(op)?;
    let rendered = report(&world.series, format).map_err(op)?;
    lab::write_text(&args.out, &rendered)?;
    if let Some(events_out) = &args.events_out {
        let mut lines = String::new();
        for event in &world.register.events {
            lines.push_str(
                &serde_json::to_string(event).map_err(|e| Failure::Op(format!("ENCODE: {e}")))?,
            );
            lines.push('\n');
        }
        lab::write_text(events_out, &lines)?;
    }
    let last = world.series.last().expect("a run has at least one row");
    let transfers: u64 = world.series.rows.iter().map(MetricsRow::tx_total).sum();
    println!(
        "ticks: {} transfers: {} thefts-value: {} stranded-value: {}",
        config.total_ticks, transfers, last.thefts_value, last.stranded_value
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let rows: Vec<MetricsRow> = lab::read_json(&args.input)?;
    let format = ReportFormat::parse(&args.format).ok_or_else(|| {
        usage(format!(
            "unknown format {:?}; expected csv or json",
            args.format
        ))
    })?;
    let rendered = report(&MetricsSeries { rows }, format).map_err(op)?;
    match &args.out {
        Some(path) => {
            lab::write_text(path, &rendered)?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_sizes(args: SizesArgs) -> Result<(), Failure> {
    let cfg = SchemeConfig::default();
    let height = args.mss_height.unwrap_or(cfg.mss_height);
    let schemes = match &args.scheme {
        Some(s) => vec![parse_scheme(s)?],
        None => vec![
            SchemeId::ClassicalSchnorr,
            SchemeId::PqWots,
            SchemeId::PqMss,
            SchemeId::HybridCm,
        ],
    };
    let reports = schemes
        .iter()
        .map(|&scheme| scheme_sizes_with_height(&cfg, scheme, height))
        .collect::<Result<Vec<_>, _>>()
        .map_err(op)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&reports)
                .map_err(|e| Failure::Op(format!("ENCODE: {e}")))?
        );
    } else {
        for r in &reports {
            println!(
                "{}: public {} / private {} / signature {} bytes",
                r.scheme.name(),
                r.public_bytes,
                r.private_bytes,
                r.signature_bytes
            );
        }
    }
    Ok(())
}
