//! Flat `key = value` text files used for dataset metadata, training
//! configs and device profiles.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! a repeated key is a parse error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, line_no, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(source, line_no, "empty key"));
            }
            let value = value.trim().to_string();
            if entries.insert(key.to_string(), (line_no, value)).is_some() {
                return Err(Error::parse(source, line_no, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { source: source.to_string(), entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses an optional value; a present but malformed value is an error.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::parse(&self.source, *line, format!("bad value for `{key}`: {e}"))),
        }
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::parse(&self.source, 0, format!("missing key `{key}`")))
    }

    /// Error for a key that exists but failed a semantic check.
    pub fn invalid(&self, key: &str, msg: impl Into<String>) -> Error {
        let line = self.entries.get(key).map(|(l, _)| *l).unwrap_or(0);
        Error::parse(&self.source, line, msg)
    }
}

/// Renders entries in the order given.
pub fn render<'a>(entries: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let kv = KeyValues::parse("# header\nlr = 0.001\n\nprofile=sinabs_like\n", "cfg").unwrap();
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.get_str("profile"), Some("sinabs_like"));
        assert_eq!(kv.get::<u32>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KeyValues::parse("a = 1\na = 2\n", "x").is_err());
        let err = KeyValues::parse("a = 1\nnot a pair\n", "x").unwrap_err();
        assert!(err.to_string().contains("x:2"), "{err}");
    }

    #[test]
    fn bad_value_reports_line() {
        let kv = KeyValues::parse("\n\nbatch = ten\n", "cfg").unwrap();
        let err = kv.get::<usize>("batch").unwrap_err();
        assert!(err.to_string().starts_with("cfg:3"), "{err}");
    }
}
