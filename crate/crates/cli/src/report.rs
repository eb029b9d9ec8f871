//! Machine-readable run reports: one JSON object per run.

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const VERSION: &str = match option_env!("FOLEYFLOW_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

pub struct Report {
    command: &'static str,
    seed: Option<u64>,
    config: Vec<(String, String)>,
    results: Map<String, Value>,
}

impl Report {
    pub fn new(command: &'static str) -> Self {
        Report {
            command,
            seed: None,
            config: Vec::new(),
            results: Map::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    /// Records one resolved configuration entry.
    pub fn config(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.config.push((key.into(), value.to_string()));
        self
    }

    pub fn config_text(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config(k.trim(), v.trim());
            }
        }
        self
    }

    pub fn result(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.results.insert(key.to_string(), value.into());
        self
    }

    /// SHA-256 over the sorted `key=value` lines of the configuration.
    pub fn config_hash(&self) -> String {
        let mut lines: Vec<String> = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        lines.sort();
        let digest = Sha256::digest(lines.concat().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        let config: Map<String, Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        json!({
            "command": self.command,
            "version": VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash(),
            "config": config,
            "results": self.results,
        })
        .to_string()
    }

    /// Aligned `key  value` lines for people.
    pub fn summary(&self) -> String {
        let width = self.results.keys().map(String::len).max().unwrap_or(0);
        self.results
            .iter()
            .map(|(k, v)| format!("{k:width$}  {v}\n"))
            .collect()
    }
}
