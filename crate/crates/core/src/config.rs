//! Flat `key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed by
//! typed getters; [`KvConfig::finish`] rejects whatever was not consumed.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Prefix for environment overrides: `SPIRA_SEED=3` overrides `seed`,
/// `SPIRA_NOISE_COUNTS__PATIENT=0` overrides `noise_counts.patient`.
pub const ENV_PREFIX: &str = "SPIRA_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    consumed: std::collections::BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self {
            entries,
            consumed: Default::default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    /// Applies `SPIRA_*` variables from `vars`. `__` maps to `.`; names are
    /// lower-cased.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                if rest.is_empty() {
                    continue;
                }
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.set(key, value);
            }
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        // Environment overrides arrive lower-cased, so fall back to a
        // case-insensitive match.
        let found = self
            .entries
            .get_key_value(key)
            .or_else(|| self.entries.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)));
        let Some((actual, raw)) = found else {
            return Ok(None);
        };
        self.consumed.insert(actual.clone());
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Reads a `lo,hi` pair.
    pub fn get_pair<T>(&mut self, key: &str, default: (T, T)) -> Result<(T, T)>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.get::<String>(key)? else {
            return Ok(default);
        };
        let (a, b) = raw
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("key `{key}`: expected `lo,hi`, got `{raw}`")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
        };
        Ok((parse(a)?, parse(b)?))
    }

    /// Fails on any key no getter consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Builds a `key=value` listing in insertion order.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key}={value}\n"));
        self
    }

    pub fn put_pair(&mut self, key: &str, pair: (impl Display, impl Display)) -> &mut Self {
        self.out.push_str(&format!("{key}={},{}\n", pair.0, pair.1));
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}
