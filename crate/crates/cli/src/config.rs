//! Flat `key=value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Dotted keys address
//! struct fields: `model.d = 64` sets `d` on the model configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key=value, got {raw:?}", i + 1))?;
            let k = k.trim();
            if k.is_empty() {
                bail!("config line {}: empty key", i + 1);
            }
            values.insert(k.to_string(), v.trim().trim_matches('"').to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key}: {e}")))
            .transpose()
    }

    /// `flag`, else the config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Applies every `prefix.field = value` entry to `base` by field name.
    /// Values are read as JSON when they parse, else as strings; unknown
    /// fields are rejected.
    pub fn overlay<T: Serialize + DeserializeOwned>(&self, base: T, prefix: &str) -> Result<T> {
        let mut json = serde_json::to_value(base)?;
        let obj = json
            .as_object_mut()
            .ok_or_else(|| anyhow!("{prefix} settings are not a struct"))?;
        let dotted = format!("{prefix}.");
        for (k, v) in &self.values {
            let Some(field) = k.strip_prefix(&dotted) else { continue };
            if !obj.contains_key(field) {
                bail!("unknown config key {k}");
            }
            let parsed = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.clone()));
            obj.insert(field.to_string(), parsed);
        }
        serde_json::from_value(json).with_context(|| format!("invalid {prefix}.* settings"))
    }
}
