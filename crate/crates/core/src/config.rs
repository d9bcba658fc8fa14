//! Minimal `key = value` text format used by manifests and config files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat only
//! when the consumer reads them with [`KeyValues::take_all`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
    used: bool,
}

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, Vec<Entry>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<Entry>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                // `frame 1 0.0 0.0`-style records: first token is the key.
                None => match line.split_once(char::is_whitespace) {
                    Some((k, v)) => (k.trim(), v.trim()),
                    None => {
                        return Err(Error::Config {
                            line: i + 1,
                            message: format!("expected `key = value`, got `{line}`"),
                        })
                    }
                },
            };
            if key.is_empty() {
                return Err(Error::Config {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.entry(key.to_string()).or_default().push(Entry {
                line: i + 1,
                value: value.to_string(),
                used: false,
            });
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Takes a single-valued key, parsing it as `V`.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        let Some(list) = self.entries.get_mut(key) else {
            return Ok(None);
        };
        if list.len() > 1 {
            return Err(Error::Config {
                line: list[1].line,
                message: format!("duplicate key `{key}`"),
            });
        }
        let entry = &mut list[0];
        entry.used = true;
        entry.value.parse::<V>().map(Some).map_err(|e| Error::Config {
            line: entry.line,
            message: format!("bad value for `{key}`: {e}"),
        })
    }

    pub fn require<V: FromStr>(&mut self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        self.take(key)?.ok_or_else(|| Error::Config {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    /// Takes every occurrence of a repeated key as `(line, raw value)`.
    pub fn take_all(&mut self, key: &str) -> Vec<(usize, String)> {
        match self.entries.get_mut(key) {
            Some(list) => list
                .iter_mut()
                .map(|e| {
                    e.used = true;
                    (e.line, e.value.clone())
                })
                .collect(),
            None => Vec::new(),
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        for (key, list) in &self.entries {
            if let Some(e) = list.iter().find(|e| !e.used) {
                return Err(Error::Config {
                    line: e.line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown() {
        let mut kv = KeyValues::parse("# c\na = 1\n\nb = x y\n").unwrap();
        assert_eq!(kv.require::<u32>("a").unwrap(), 1);
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("unknown key `b`"));
    }

    #[test]
    fn repeated_records() {
        let mut kv = KeyValues::parse("frame 1 0.0 0.5\nframe 2 1.0 1.0\n").unwrap();
        let frames = kv.take_all("frame");
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].1, "2 1.0 1.0");
        kv.finish().unwrap();
    }

    #[test]
    fn duplicate_single_key_is_error() {
        let mut kv = KeyValues::parse("a = 1\na = 2\n").unwrap();
        assert!(kv.take::<u32>("a").is_err());
    }

    #[test]
    fn bad_value_reports_line() {
        let mut kv = KeyValues::parse("\n\nrows = abc\n").unwrap();
        match kv.take::<usize>("rows") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
