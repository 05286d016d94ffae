//! Run knobs as a flat `key = value` file.
//!
//! Every tunable a subcommand reads goes through [`Settings::get`], which
//! falls back to the built-in default and records the value that was actually
//! used. The recorded map is echoed into the run directory as `config.txt`,
//! which parses back through this module — rerunning from the echo reproduces
//! the run. Keys in the file that no command reads are rejected as typos.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct Settings {
    given: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Settings {
    /// Parses a config file, or yields all-defaults when no path was given.
    /// Lines are `key = value`; blank lines and `#` comments are skipped.
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let mut given = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected `key = value`", p.display(), i + 1))?;
                let key = k.trim().to_string();
                if key.is_empty() {
                    bail!("{}:{}: empty key", p.display(), i + 1);
                }
                if given.insert(key.clone(), v.trim().to_string()).is_some() {
                    bail!("{}:{}: duplicate key `{key}`", p.display(), i + 1);
                }
            }
        }
        Ok(Settings {
            given,
            used: BTreeMap::new(),
        })
    }

    /// The value for `key`, parsed from the file or taken from `default`.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.given.get(key) {
            Some(raw) => {
                let v: T = raw
                    .parse()
                    .map_err(|e| anyhow::anyhow!("config key `{key}` = `{raw}`: {e}"))?;
                self.used.insert(key.to_string(), raw.clone());
                Ok(v)
            }
            None => {
                self.used.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// Comma-separated list variant of [`Settings::get`]. An empty value is
    /// an empty list.
    pub fn get_list<T>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        match self.given.get(key) {
            Some(raw) => {
                let items: Result<Vec<T>> = raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|e| anyhow::anyhow!("config key `{key}` item `{s}`: {e}"))
                    })
                    .collect();
                self.used.insert(key.to_string(), raw.clone());
                items
            }
            None => {
                let echo: Vec<String> = default.iter().map(T::to_string).collect();
                self.used.insert(key.to_string(), echo.join(","));
                Ok(default.to_vec())
            }
        }
    }

    /// Errors on unread keys in the command's own sections — almost always a
    /// misspelled knob. Keys under other sections are left alone, so one
    /// config file can serve every stage of a pipeline. A key with no
    /// section dot at all is always an error.
    pub fn reject_unknown(&self, sections: &[&str]) -> Result<()> {
        let mut unknown = Vec::new();
        for k in self.given.keys() {
            if self.used.contains_key(k) {
                continue;
            }
            match k.split_once('.') {
                Some((sec, _)) if !sections.contains(&sec) => {}
                _ => unknown.push(k.as_str()),
            }
        }
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        Ok(())
    }

    /// The resolved configuration, one sorted `key = value` line each, in the
    /// same syntax [`Settings::load`] reads.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.used {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
