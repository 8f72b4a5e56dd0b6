//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are namespaced
//! by section prefix (`train.`, `augment.`, `phantom.`, `pipeline.`); command
//! line flags are applied on top with [`Config::set`].

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("config line {}", n + 1), "expected key = value")
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.values.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::format(key.to_string(), format!("cannot parse {v:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c =
            Config::parse("# comment\ntrain.epochs = 600\n\ntrain.learning_rate=1e-3\n").unwrap();
        assert_eq!(c.get_or("train.epochs", 1usize).unwrap(), 600);
        assert_eq!(c.get_or("train.learning_rate", 0.0f64).unwrap(), 1e-3);
        assert_eq!(c.get_or("train.seed", 9u64).unwrap(), 9);
        c.set("train.epochs", 5);
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), Some(5));
        assert!(c.get::<usize>("train.learning_rate").is_err());
        assert!(Config::parse("no equals sign").is_err());
    }
}
