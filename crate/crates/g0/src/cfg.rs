//! Plain-text configuration: `[section]` headers followed by `key = value`
//! lines. `#` starts a comment. Values are whitespace-separated fields; the
//! typed getters below parse them. Sections keep insertion order so repeated
//! runs see identical iteration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Built-in configuration used when the CLI is run without `--config`.
pub const DEFAULT_CONFIG: &str = include_str!("assets/default.cfg");

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    keys: Vec<(String, String)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.keys
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            Error::config(format!("section [{}] is missing key `{}`", self.name, key))
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::config(format!("[{}] {} = {}: not a number", self.name, key, v))
                })
            })
            .transpose()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.trim().parse::<usize>().map_err(|_| {
                    Error::config(format!("[{}] {} = {}: not an integer", self.name, key, v))
                })
            })
            .transpose()
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_usize(key)?.unwrap_or(default))
    }

    /// Value split on whitespace and parsed as f64 fields.
    pub fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::config(format!("[{}] {}: field `{}` is not a number", self.name, key, tok))
                })
            })
            .collect()
    }

    /// All `(key, value)` pairs whose key starts with `prefix.`, in file order.
    /// The returned keys have the prefix stripped.
    pub fn prefixed(&self, prefix: &str) -> Vec<(&str, &str)> {
        let dotted = format!("{prefix}.");
        self.keys
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(dotted.as_str())
                    .map(|rest| (rest, v.as_str()))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    sections: Vec<Section>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut sections: Vec<Section> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(idx) => &raw[..idx],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::config(format!("line {}: unterminated section header", lineno + 1))
                })?;
                sections.push(Section {
                    name: name.trim().to_string(),
                    keys: Vec::new(),
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let section = sections.last_mut().ok_or_else(|| {
                Error::config(format!("line {}: key before any [section]", lineno + 1))
            })?;
            section
                .keys
                .push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Config { sections })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn default_config() -> Config {
        Config::parse(DEFAULT_CONFIG).expect("built-in config parses")
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require_section(&self, name: &str) -> Result<&Section> {
        self.section(name)
            .ok_or_else(|| Error::config(format!("missing [{name}] section")))
    }

    /// Sections whose name starts with `prefix ` (space-separated), e.g.
    /// `sections_with_prefix("task")` yields `[task table_bussing]` style
    /// sections paired with the remainder of the name.
    pub fn sections_with_prefix(&self, prefix: &str) -> Vec<(&str, &Section)> {
        let pat = format!("{prefix} ");
        self.sections
            .iter()
            .filter_map(|s| s.name.strip_prefix(pat.as_str()).map(|rest| (rest.trim(), s)))
            .collect()
    }
}
