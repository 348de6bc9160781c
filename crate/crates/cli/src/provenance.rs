use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Commit the binary was built from, or `unknown` outside a git checkout.
pub const BUILD_ID: &str = env!("OVERCNN_BUILD_ID");

/// Where an output came from: tool version, build, the SHA-256 of the
/// config bytes, and every seed that was used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub build: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
}

impl Provenance {
    pub fn new(command: &str, config_bytes: &[u8]) -> Self {
        Self {
            tool: "overcnn",
            version: VERSION,
            build: BUILD_ID,
            command: command.into(),
            config_sha256: sha256_hex(config_bytes),
            seeds: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
