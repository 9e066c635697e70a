//! Output provenance: config hashes and the self-description every output
//! file carries (tool version, seed, config hash). No timestamps anywhere,
//! so reruns stay byte-identical.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: u64, resolved_config: &str) -> Self {
        Self {
            tool_version: artiqc::VERSION.to_string(),
            seed,
            config_hash: config_hash(resolved_config),
        }
    }

    /// One-line form for NIfTI descrip fields and CSV comment headers.
    pub fn one_line(&self) -> String {
        format!(
            "artiqc v{} seed={} cfg={}",
            self.tool_version, self.seed, self.config_hash
        )
    }
}

/// First 12 hex chars of the SHA-256 of the resolved config text.
pub fn config_hash(resolved_config: &str) -> String {
    let digest = Sha256::digest(resolved_config.as_bytes());
    hex::encode(&digest[..6])
}
