use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Written as `<output>.manifest` next to every output file. The thread
/// count is left out on purpose: outputs do not depend on it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, InputDigest>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            tool: "addq",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(
            name.to_string(),
            InputDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Canonical form: keys sorted, no insignificant whitespace.
    pub fn to_canonical_json(&self) -> anyhow::Result<String> {
        // serde_json::Value keeps object keys in sorted order
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    pub fn write_next_to(&self, output: &Path) -> anyhow::Result<PathBuf> {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest");
        let path = PathBuf::from(name);
        let mut text = self.to_canonical_json()?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct Cfg {
            zeta: u32,
            alpha: f64,
        }
        let m = RunManifest::new(
            "quantize",
            7,
            &Cfg {
                zeta: 1,
                alpha: 0.5,
            },
        )
        .unwrap();
        let s = m.to_canonical_json().unwrap();
        assert!(s.find("\"alpha\"").unwrap() < s.find("\"zeta\"").unwrap());
        assert!(s.starts_with("{\"command\":\"quantize\",\"config\""));
        assert!(!s.contains(' '));
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
