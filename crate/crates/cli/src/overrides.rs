//! Free-form `--key value` flags mapped onto config keys.

use lfm_core::train::CONFIG_KEYS;

use crate::error::{CliError, Result};

/// Splits `--key value` / `--key=value` words into `(key, value)` pairs.
/// Dashes in keys become underscores; keys are not checked here.
pub fn parse_flags(words: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = words.iter();
    while let Some(w) = it.next() {
        let Some(flag) = w.strip_prefix("--") else {
            return Err(CliError::Config(format!("unexpected argument {w:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Parses `KEY=VALUE` words from repeated `--set`.
pub fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().replace('-', "_"), v.trim().to_string()))
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

/// Whether a config text assigns `key`.
pub fn text_sets_key(text: &str, key: &str) -> bool {
    text.lines().any(|l| {
        let l = l.split('#').next().unwrap_or("");
        l.split_once('=').is_some_and(|(k, _)| k.trim() == key)
    })
}

pub fn is_config_key(key: &str) -> bool {
    CONFIG_KEYS.contains(&key)
}
