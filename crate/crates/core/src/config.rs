//! `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, keys may be dotted
//! (`relay.identity_seed`). Every file is checked against a list of known keys
//! so typos fail loudly with a line number.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    BadValue { line: usize, key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str, known: &[&str]) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Malformed { line })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Malformed { line });
            }
            if !known.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line))
                .is_some()
            {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path, known: &[&str]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, known)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::BadValue {
                line: *line,
                key: key.to_string(),
                message: e.to_string(),
            }),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(Vec::new());
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| ConfigError::BadValue {
                    line: *line,
                    key: key.to_string(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(_, l)| *l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KNOWN: &[&str] = &["relay.listen", "relay.identity_seed", "gossip.peers"];

    #[test]
    fn parses_values_and_comments() {
        let cfg = KvConfig::parse(
            "# relay\nrelay.listen = 127.0.0.1:9001\n\nrelay.identity_seed=7 # inline\n",
            KNOWN,
        )
        .unwrap();
        assert_eq!(cfg.raw("relay.listen"), Some("127.0.0.1:9001"));
        assert_eq!(cfg.require::<u64>("relay.identity_seed").unwrap(), 7);
        assert_eq!(cfg.get::<u64>("gossip.peers").unwrap(), None);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = KvConfig::parse("relay.listen = x\nrelay.lisen = y\n", KNOWN).unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 2,
                key: "relay.lisen".into()
            }
        );
    }

    #[test]
    fn malformed_and_duplicate_lines() {
        assert_eq!(
            KvConfig::parse("relay.listen\n", KNOWN).unwrap_err(),
            ConfigError::Malformed { line: 1 }
        );
        assert!(matches!(
            KvConfig::parse("relay.listen=a\nrelay.listen=b", KNOWN).unwrap_err(),
            ConfigError::Duplicate { line: 2, .. }
        ));
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let cfg = KvConfig::parse("\nrelay.identity_seed = seven", KNOWN).unwrap();
        assert!(matches!(
            cfg.require::<u64>("relay.identity_seed").unwrap_err(),
            ConfigError::BadValue { line: 2, .. }
        ));
    }

    #[test]
    fn lists_split_on_commas() {
        let cfg = KvConfig::parse("gossip.peers = 127.0.0.1:1, 127.0.0.1:2,", KNOWN).unwrap();
        let peers: Vec<std::net::SocketAddr> = cfg.list("gossip.peers").unwrap();
        assert_eq!(peers.len(), 2);
    }
}
