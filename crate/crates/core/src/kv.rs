//! Plain-text `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! Keys are case-sensitive; duplicate keys are an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("`{key}` = `{v}`: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma- or whitespace-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.entries.get(key) else { return Ok(None) };
        v.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("`{key}` element `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# scene\nprimitive = bowl  # inline\nres=64\n\nlist = 1, 2 3\n").unwrap();
        assert_eq!(kv.get_str("primitive"), Some("bowl"));
        assert_eq!(kv.get::<usize>("res").unwrap(), Some(64));
        assert_eq!(kv.get_list::<f64>("list").unwrap(), Some(vec![1.0, 2.0, 3.0]));
        assert_eq!(kv.get_or("missing", 7u32).unwrap(), 7);
        assert!(kv.reject_unknown(&["primitive", "res"]).is_err());
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(KeyValues::parse("no equals sign").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let kv = KeyValues::parse("n = x").unwrap();
        assert!(kv.get::<usize>("n").is_err());
    }
}
