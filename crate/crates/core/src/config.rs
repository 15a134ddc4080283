//! Flat `key = value` text configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FlatConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if cfg.entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(cfg)
    }

    /// Parses a single `key=value` override.
    pub fn parse_override(text: &str) -> Result<(String, String)> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{text}` is not `key=value`")))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    /// Parses a comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.get(key) else { return Ok(None) };
        if v.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|item| {
                item.trim()
                    .parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{item}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Errors on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
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
        let cfg = FlatConfig::parse("# c\n\nlr = 1e-4\nscales = 1, 2,3\nempty =\n").unwrap();
        assert_eq!(cfg.get_parsed::<f64>("lr").unwrap(), Some(1e-4));
        assert_eq!(cfg.get_list::<usize>("scales").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(cfg.get_list::<usize>("empty").unwrap(), Some(vec![]));
        assert_eq!(cfg.get_parsed::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(FlatConfig::parse("novalue").is_err());
        assert!(FlatConfig::parse("a = 1\na = 2").is_err());
        let cfg = FlatConfig::parse("a = x").unwrap();
        assert!(cfg.get_parsed::<u32>("a").is_err());
        assert!(cfg.reject_unknown(&["b"]).is_err());
    }
}
