//! Content hashes of inputs and outputs, recorded in every metrics file.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use knnlm::digest::{sha256, to_hex};

/// Reads a required input, naming it in the error if missing.
pub fn read_input(role: &str, path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("missing {role}: {}", path.display()))
}

#[derive(Debug, Default)]
pub struct Record {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Record {
    pub fn input(&mut self, role: &str, bytes: &[u8]) {
        self.inputs.insert(role.to_string(), to_hex(&sha256(bytes)));
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), to_hex(&sha256(bytes)));
        Ok(())
    }

    /// Writes `name` as pretty JSON: `body` plus command, seed and hashes.
    pub fn finish(
        self,
        dir: &Path,
        name: &str,
        command: &str,
        seed: u64,
        body: impl Serialize,
    ) -> Result<()> {
        let mut v = json!({
            "command": command,
            "seed": seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        if let (Value::Object(m), Value::Object(extra)) = (&mut v, serde_json::to_value(body)?) {
            m.extend(extra);
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
