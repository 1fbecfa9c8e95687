//! Flat `key=value` configuration files and flag > file > default resolution.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use cmam::{Error, Result};

/// Every key a config file may set, with the flag it mirrors.
pub const KEYS: &[(&str, &str)] = &[
    ("threads", "--threads"),
    ("seed", "--seed"),
    ("stopwords", "--stopwords"),
    ("max_vocab", "embed --max-vocab"),
    ("min_count", "embed --min-count"),
    ("min_len", "--min-len"),
    ("embed_dim", "embed --dim"),
    ("embed_window", "embed --window"),
    ("embed_negatives", "embed --negatives"),
    ("embed_epochs", "embed --epochs"),
    ("embed_lr", "embed --lr"),
    ("center", "embed --center"),
    ("aspects", "train --aspects"),
    ("kernels", "train --kernels"),
    ("epochs", "train --epochs"),
    ("batch_size", "train --batch-size"),
    ("lr", "train --lr"),
    ("beta1", "train --beta1"),
    ("beta2", "train --beta2"),
    ("adam_eps", "train --adam-eps"),
    ("lambda", "train --lambda"),
    ("ortho_offset", "train --ortho-offset"),
    ("negatives", "train --negatives"),
    ("tlas", "train --no-tlas (tlas=false)"),
    ("q_as", "predict --q-as"),
    ("n_as", "predict --n-as"),
    ("q_at", "predict --q-at"),
    ("n_at", "predict --n-at"),
    ("top_n", "aspects --top-n"),
    ("sentences", "synth --sentences"),
    ("instances", "gradcheck --instances"),
    ("step", "gradcheck --step"),
    ("tolerance", "gradcheck --tolerance"),
];

pub fn keys_help() -> String {
    let mut out = String::from("Config file keys (one key=value per line, # starts a comment):\n");
    for (k, flag) in KEYS {
        out.push_str(&format!("  {k:<16} {flag}\n"));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("config line {}: unknown key {key:?}", n + 1)));
            }
            if values.insert(key.to_owned(), value.trim().to_owned()).is_some() {
                return Err(Error::Config(format!("config line {}: key {key:?} set twice", n + 1)));
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The flag value if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        debug_assert!(KEYS.iter().any(|(k, _)| *k == key), "undocumented key {key}");
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    /// A boolean switch: set by the flag, else by the file, else `default`.
    pub fn switch(&self, flag: bool, key: &str, when_flagged: bool, default: bool) -> Result<bool> {
        if flag {
            return Ok(when_flagged);
        }
        self.pick(None, key, default)
    }
}

/// Parses a comma-separated list such as `1,3,5`.
pub fn parse_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {t:?} in list {text:?}")))
        })
        .collect()
}
