//! Config-file loading with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// A key set on the command line, to be laid over the config file.
pub type Override = (&'static str, Value);

pub fn put<T: Into<Value>>(out: &mut Vec<Override>, key: &'static str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key, v.into()));
    }
}

pub fn put_path(out: &mut Vec<Override>, key: &'static str, v: &Option<PathBuf>) {
    if let Some(p) = v {
        out.push((key, Value::String(p.display().to_string())));
    }
}

/// Reads `file` (if any), resolves its relative `path_keys` against the
/// file's directory, applies `overrides` on top and deserializes the result.
/// Keys absent from both take the type's defaults.
pub fn resolve<T: DeserializeOwned>(
    file: Option<&Path>,
    path_keys: &[&str],
    overrides: Vec<Override>,
) -> Result<T> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mut table: Table =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new(""));
            for key in path_keys {
                if let Some(Value::String(s)) = table.get(*key) {
                    let p = Path::new(s);
                    if p.is_relative() {
                        let joined = base.join(p).display().to_string();
                        table.insert((*key).to_string(), Value::String(joined));
                    }
                }
            }
            table
        }
        None => Table::new(),
    };
    for (key, value) in overrides {
        table.insert(key.to_string(), value);
    }
    Value::Table(table)
        .try_into()
        .context("invalid configuration")
}

pub fn int(v: Option<usize>) -> Option<i64> {
    v.map(|x| x as i64)
}

pub fn uint64(v: Option<u64>) -> Option<i64> {
    v.map(|x| x as i64)
}
