//! Flat `key = value` text files with `#` comments, used for dataset
//! manifests and run configs.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn parse(text: &str, origin: &Path) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<IndexMap<String, String>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

pub fn render(entries: &IndexMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Typed lookup of a required key.
pub fn get<T: std::str::FromStr>(map: &IndexMap<String, String>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}
