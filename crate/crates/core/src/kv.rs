//! Flat `key=value` text, used for config files and checkpoint headers.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("bad value for {key}: {value:?}")]
    Value { key: String, value: String },
}

/// Parsed key/value pairs. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(KvError::Duplicate(key));
            }
        }
        Ok(Self { entries })
    }

    /// Rejects any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(KvError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| KvError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Sets `key`, replacing any earlier value.
    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// Renders pairs in the given order, one per line.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}
