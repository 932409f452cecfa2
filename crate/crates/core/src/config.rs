//! `key=value` text used by config files and the checkpoint footer.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Every key must be consumed, so a typo surfaces as an error instead of
//! being silently dropped.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{PcnError, Result};

#[derive(Debug, Default, Clone)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PcnError::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(PcnError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Remove and parse `key`, if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| PcnError::Config(format!("bad value `{raw}` for `{key}`"))),
        }
    }

    pub fn require<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.take(key)?
            .ok_or_else(|| PcnError::Config(format!("missing key `{key}`")))
    }

    /// Fail if any key was never taken.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(PcnError::Config(format!("unknown key `{key}`")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Render pairs in the given order.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_consumes() {
        let mut kv = KvMap::parse("# run\narch=C\n\ncycles = 5\n").unwrap();
        assert_eq!(kv.require::<String>("arch").unwrap(), "C");
        assert_eq!(kv.take::<usize>("cycles").unwrap(), Some(5));
        assert_eq!(kv.take::<usize>("epochs").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_error() {
        let mut kv = KvMap::parse("arch=A\nbogus=1\n").unwrap();
        kv.take::<String>("arch").unwrap();
        assert!(matches!(kv.finish(), Err(PcnError::Config(_))));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(KvMap::parse("arch A").is_err());
        assert!(KvMap::parse("a=1\na=2").is_err());
        let mut kv = KvMap::parse("cycles=x").unwrap();
        assert!(kv.take::<usize>("cycles").is_err());
    }
}
