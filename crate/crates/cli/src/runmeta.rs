//! Run manifests: what a command produced, under which config and seeds.
//! The manifest is the only artifact that carries a timestamp.

use serde::Serialize;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    /// FNV-1a 64 over the raw config bytes; recomputable from the file.
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub artifacts: Vec<String>,
    pub unix_timestamp: u64,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8]) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash: format!("{:016x}", fnv1a64(config_bytes)),
            seeds: Vec::new(),
            artifacts: Vec::new(),
            unix_timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.to_string(), value));
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("run_manifest.json"), json)
    }
}
