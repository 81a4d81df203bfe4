//! `key=value` sidecar files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone, PartialEq)]
pub(crate) struct Meta {
    entries: Vec<(String, String)>,
}

impl Meta {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub(crate) fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub(crate) fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("metadata missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Corrupt(format!("metadata key `{key}` has bad value `{raw}`")))
    }

    pub(crate) fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub(crate) fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        let mut meta = Meta::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Corrupt(format!("metadata line {}: expected key=value", lineno + 1))
            })?;
            let k = k.trim();
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Corrupt(format!("metadata key `{k}` repeated")));
            }
            meta.set(k, v.trim());
        }
        Ok(meta)
    }

    pub(crate) fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(Error::at_path(path))
    }

    pub(crate) fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
        Self::parse(&text)
    }
}
