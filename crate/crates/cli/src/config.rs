//! `key = value` configuration file.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const KEYS: [&str; 7] = [
    "nodes",
    "cores",
    "mem_per_core",
    "mem_per_task",
    "poll_interval",
    "partition",
    "max_iterations",
];

/// Work-directory root used when `--out`/`--work` is not given.
pub const WORKDIR_ENV: &str = "CHORDFIT_WORKDIR";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key = value", i + 1);
            };
            let (k, v) = (k.trim().replace('-', "_"), v.trim());
            if !KEYS.contains(&k.as_str()) {
                bail!("line {}: unknown key {k:?}", i + 1);
            }
            if v.is_empty() {
                bail!("line {}: empty value for {k}", i + 1);
            }
            values.insert(k, v.to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Parsed value for `key`, if present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config {key} = {v:?}: {e}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let c = Config::parse("# cluster\nnodes = 2\ncores=24\nmem-per-task = 1G # per task\n").unwrap();
        assert_eq!(c.get::<usize>("nodes").unwrap(), Some(2));
        assert_eq!(c.get::<usize>("cores").unwrap(), Some(24));
        assert_eq!(c.get::<String>("mem_per_task").unwrap().as_deref(), Some("1G"));
        assert_eq!(c.get::<f64>("poll_interval").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(Config::parse("threads = 4").is_err());
        assert!(Config::parse("nodes").is_err());
        assert!(Config::parse("nodes =").is_err());
        let c = Config::parse("nodes = two").unwrap();
        assert!(c.get::<usize>("nodes").is_err());
    }
}
