//! `key=value` configuration files.
//!
//! One entry per line; blank lines and lines starting with `#` are skipped.
//! Keys and values are trimmed. Later duplicates override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?}: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
}

/// Ordered key=value map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries of `other` override ours.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>, KvError>
    where
        V::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: V::Err| KvError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                msg: e.to_string(),
            }),
        }
    }

    /// Parse `key` if present, otherwise keep `slot`.
    pub fn read_into<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<(), KvError>
    where
        V::Err: Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V, KvError>
    where
        V::Err: Display,
    {
        self.parsed(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Fail on the first key outside `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(KvError::Unknown(k.to_string())),
            None => Ok(()),
        }
    }

    /// Render sorted by key, one `key=value` per line.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let m = KvMap::parse("# c\n a = 1 \n\nb=x=y\na=2\n").unwrap();
        assert_eq!(m.get("a"), Some("2"));
        assert_eq!(m.get("b"), Some("x=y"));
        assert_eq!(m.require::<u32>("a").unwrap(), 2);
    }

    #[test]
    fn syntax_and_value_errors() {
        assert_eq!(
            KvMap::parse("ok=1\nnope\n"),
            Err(KvError::Syntax {
                line: 2,
                text: "nope".into()
            })
        );
        let m = KvMap::parse("n=abc").unwrap();
        assert!(matches!(m.require::<usize>("n"), Err(KvError::BadValue { .. })));
        assert!(matches!(m.require::<usize>("z"), Err(KvError::Missing(_))));
        assert!(matches!(m.check_known(&["x"]), Err(KvError::Unknown(_))));
    }

    #[test]
    fn render_round_trips() {
        let mut m = KvMap::new();
        m.set("z", 1.5);
        m.set("a", "rotary");
        assert_eq!(m.render(), "a=rotary\nz=1.5\n");
        assert_eq!(KvMap::parse(&m.render()).unwrap(), m);
    }
}
