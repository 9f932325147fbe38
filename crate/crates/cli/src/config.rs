//! Config files: a single JSON object or `key = value` lines. Keys are
//! matched with `-` and `_` treated alike; flags given on the command line
//! win over file values.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

/// Bad flags or config contents; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, Value>,
    used: RefCell<BTreeSet<String>>,
}

fn norm(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let trimmed = text.trim_start();
        let mut values = BTreeMap::new();
        if trimmed.starts_with('{') {
            let obj: serde_json::Map<String, Value> =
                serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
            for (k, v) in obj {
                values.insert(norm(&k), v);
            }
        } else {
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
                let v = v.trim();
                let value =
                    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
                values.insert(norm(k), value);
            }
        }
        Ok(Self {
            values,
            used: RefCell::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        let key = norm(key);
        let v = self.values.get(&key);
        if v.is_some() {
            self.used.borrow_mut().insert(key);
        }
        v
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> anyhow::Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| usage(format!("config key `{key}`: {e}"))),
        }
    }

    /// A list given as a JSON array or a comma-separated string.
    pub fn get_list<T: DeserializeOwned>(&self, key: &str) -> anyhow::Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => s
                .split(',')
                .map(|part| {
                    let part = part.trim();
                    let v = serde_json::from_str(part)
                        .unwrap_or_else(|_| Value::String(part.to_string()));
                    serde_json::from_value(v).map_err(|e| usage(format!("config key `{key}`: {e}")))
                })
                .collect::<anyhow::Result<Vec<T>>>()
                .map(Some),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| usage(format!("config key `{key}`: {e}"))),
        }
    }

    pub fn resolve<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> anyhow::Result<T> {
        let file = self.get(key)?;
        Ok(flag.or(file).unwrap_or(default))
    }

    pub fn resolve_opt<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> anyhow::Result<Option<T>> {
        let file = self.get(key)?;
        Ok(flag.or(file))
    }

    /// Fails on keys that no lookup asked for.
    pub fn finish(&self) -> anyhow::Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_json_agree() {
        let kv = FileConfig::parse(
            "# comment\nbeam = 4\ninit = oaem\nearly-stop = 0.01\nns = 64,4096\n",
        )
        .unwrap();
        let js = FileConfig::parse(
            r#"{"beam": 4, "init": "oaem", "early_stop": 0.01, "ns": [64, 4096]}"#,
        )
        .unwrap();
        for c in [&kv, &js] {
            assert_eq!(c.get::<usize>("beam").unwrap(), Some(4));
            assert_eq!(c.get::<String>("init").unwrap().as_deref(), Some("oaem"));
            assert_eq!(c.get::<f64>("early_stop").unwrap(), Some(0.01));
            assert_eq!(c.get_list::<usize>("ns").unwrap(), Some(vec![64, 4096]));
            c.finish().unwrap();
        }
    }

    #[test]
    fn flags_win_and_unknown_keys_fail() {
        let c = FileConfig::parse("beam = 4\ntypo = 1\n").unwrap();
        assert_eq!(c.resolve(Some(8usize), "beam", 1).unwrap(), 8);
        assert_eq!(c.resolve(None, "epochs", 100usize).unwrap(), 100);
        assert!(c.finish().is_err());
    }

    #[test]
    fn bad_line_rejected() {
        assert!(FileConfig::parse("just words").is_err());
    }
}
