//! Run manifest written alongside every command's outputs. Everything except
//! the timestamp is reproducible, so output comparisons exclude this file.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub created_unix_s: u64,
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: "staci",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            created_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs: BTreeMap::new(),
            config,
            seeds: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, key: &str, value: impl ToString) {
        self.inputs.insert(key.to_string(), value.to_string());
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), body + "\n")
    }
}
