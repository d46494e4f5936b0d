//! On-disk state for a lab directory. Everything is JSON: one file for the
//! register, one for the issuing authority, one per wallet. Binary fields
//! inside those files are hex strings, so any of them can be inspected or
//! diffed with ordinary text tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use pqcbdc_core::pki::CertificateAuthority;
use pqcbdc_core::register::RegisterState;
use pqcbdc_core::wallet::WalletState;

use crate::Failure;

pub struct Lab {
    pub dir: PathBuf,
}

impl Lab {
    pub fn new(dir: &Path) -> Lab {
        Lab {
            dir: dir.to_path_buf(),
        }
    }

    pub fn register_path(&self) -> PathBuf {
        self.dir.join("register.json")
    }

    pub fn ca_path(&self) -> PathBuf {
        self.dir.join("ca.json")
    }

    pub fn wallet_path(&self, name: &str) -> Result<PathBuf, Failure> {
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
        {
            return Err(Failure::Usage(format!(
                "wallet name {name:?} must be lowercase letters, digits, '-' or '_'"
            )));
        }
        Ok(self.dir.join("wallets").join(format!("{name}.json")))
    }

    pub fn load_register(&self) -> Result<RegisterState, Failure> {
        let path = self.register_path();
        if !path.exists() {
            return Err(Failure::Op(format!(
                "REGISTER_MISSING: no register at {}; run `mint` once to create one",
                path.display()
            )));
        }
        read_json(&path)
    }

    pub fn save_register(&self, register: &RegisterState) -> Result<(), Failure> {
        write_json(&self.register_path(), register)
    }

    pub fn load_ca(
        &self,
        explicit: Option<&Path>,
    ) -> Result<(CertificateAuthority, PathBuf), Failure> {
        let path = explicit
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.ca_path());
        if !path.exists() {
            return Err(Failure::Op(format!(
                "CA_MISSING: no issuing authority at {}; create one with `cert root`",
                path.display()
            )));
        }
        Ok((read_json(&path)?, path))
    }

    pub fn load_wallet(&self, name: &str) -> Result<WalletState, Failure> {
        let path = self.wallet_path(name)?;
        if !path.exists() {
            return Err(Failure::Op(format!(
                "WALLET_MISSING: no wallet {name:?} at {}",
                path.display()
            )));
        }
        read_json(&path)
    }

    pub fn save_wallet(&self, name: &str, wallet: &WalletState) -> Result<(), Failure> {
        write_json(&self.wallet_path(name)?, wallet)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let data = fs::read_to_string(path)
        .map_err(|e| Failure::Op(format!("IO: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&data)
        .map_err(|e| Failure::Op(format!("PARSE: {} is not valid: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Op(format!("IO: cannot create {}: {e}", parent.display())))?;
    }
    let mut data = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Op(format!("ENCODE: cannot serialize {}: {e}", path.display())))?;
    data.push('\n');
    fs::write(path, data)
        .map_err(|e| Failure::Op(format!("IO: cannot write {}: {e}", path.display())))
}

pub fn write_text(path: &Path, data: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Op(format!("IO: cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, data)
        .map_err(|e| Failure::Op(format!("IO: cannot write {}: {e}", path.display())))
}
