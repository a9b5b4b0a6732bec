//! Flat `key = value` text format: one pair per line, `#` starts a comment,
//! no nesting.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("key `{key}`: cannot parse {value:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing key `{0}`")]
    Missing(String),
}

/// Parsed pairs, keyed in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
        }
        Ok(KvMap { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails on the first key not in `valid`.
    pub fn check_keys(&self, valid: &[&str]) -> Result<(), KvError> {
        for k in self.entries.keys() {
            if !valid.contains(&k.as_str()) {
                return Err(KvError::UnknownKey {
                    key: k.clone(),
                    valid: valid.join(", "),
                });
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| KvError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Overwrites `slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), KvError>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let m = KvMap::parse("# header\n\nepochs = 3  # trailing\nlr=0.5\n").unwrap();
        assert_eq!(m.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(m.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(m.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(KvMap::parse("epochs 3"), Err(KvError::Syntax { line: 1, .. })));
        assert!(matches!(KvMap::parse("a=1\na=2"), Err(KvError::Duplicate { line: 2, .. })));
        assert!(matches!(KvMap::parse(" = 2"), Err(KvError::Syntax { .. })));
    }

    #[test]
    fn unknown_key_lists_valid_ones() {
        let m = KvMap::parse("bogus = 1").unwrap();
        let err = m.check_keys(&["epochs", "seed"]).unwrap_err();
        assert_eq!(err.to_string(), "unknown key `bogus`; valid keys: epochs, seed");
    }

    #[test]
    fn bad_value_reported() {
        let m = KvMap::parse("epochs = many").unwrap();
        assert!(matches!(m.get::<usize>("epochs"), Err(KvError::BadValue { .. })));
    }

    #[test]
    fn render_roundtrips() {
        let mut m = KvMap::default();
        m.insert("b", 2.5);
        m.insert("a", "x");
        assert_eq!(KvMap::parse(&m.render()).unwrap(), m);
    }
}
