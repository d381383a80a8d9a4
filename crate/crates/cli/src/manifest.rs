//! Per-output-directory run manifest.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use nafchaos::pipeline::Config;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.toml";
pub const TOOL: &str = "nafchaos";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Git-style object hash: sha256 of `blob <len>\0<config toml>`.
    pub config_hash: String,
    /// Subcommand arguments other than the config, as given.
    pub args: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub config: Config,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn config_hash(config_toml: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", config_toml.len()).as_bytes());
    h.update(config_toml.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, started_unix: f64) -> Self {
        RunManifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.train.seed,
            started_unix,
            finished_unix: started_unix,
            config_hash: config_hash(&config.to_toml()),
            args: BTreeMap::new(),
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// A config file may be a plain config or a manifest from an earlier run.
pub fn parse_config(text: &str) -> nafchaos::Result<Config> {
    if let Ok(table) = text.parse::<toml::Table>() {
        if table.get("tool").and_then(|v| v.as_str()) == Some(TOOL) {
            if let Some(cfg) = table.get("config") {
                let snapshot = toml::to_string(cfg).expect("table serializes");
                return Config::from_toml(&snapshot);
            }
        }
    }
    Config::from_toml(text)
}
