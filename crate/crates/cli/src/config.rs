//! `--config` merging: JSON values become flags unless given explicitly.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::CliError;

const SUBCOMMANDS: [&str; 8] = ["gen-model", "nps", "stats", "mask", "eval", "sweep", "verify", "gen-docs"];

fn flag_value(v: &Value) -> Result<Option<String>, String> {
    Ok(Some(match v {
        Value::Bool(true) => return Ok(Some(String::new())),
        Value::Bool(false) | Value::Null => return Ok(None),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(format!("unsupported list item {other}")),
            })
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        Value::Object(_) => return Err("nested objects are only allowed under a subcommand name".into()),
    }))
}

fn given(args: &[OsString], flag: &str) -> bool {
    args.iter().any(|a| a.to_str().is_some_and(|s| s == flag || s.starts_with(&format!("{flag}="))))
}

/// The `--config` value, located before clap sees the arguments so that
/// config files can supply required flags.
pub fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_str()?;
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Append config-derived flags for the subcommand found in `args`.
pub fn merge(args: Vec<OsString>, path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let root: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
    let Some(sub) = args.iter().skip(1).filter_map(|a| a.to_str()).find(|a| SUBCOMMANDS.contains(a)) else {
        return Ok(args);
    };
    let section = match root.get(sub) {
        Some(Value::Object(m)) => m.clone(),
        _ => root.into_iter().filter(|(k, v)| !(SUBCOMMANDS.contains(&k.as_str()) && v.is_object())).collect(),
    };
    let mut out = args.clone();
    for (key, value) in section {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || given(&args, &flag) {
            continue;
        }
        match flag_value(&value).map_err(|e| CliError::validation(format!("config key {key}: {e}")))? {
            None => {}
            Some(v) if v.is_empty() && value.is_boolean() => out.push(flag.into()),
            Some(v) => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn explicit_flags_win_and_sections_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"mask": {"k": 4, "lambda": 0.25, "tie_policy": "lower-index-ranks-higher"}, "seed": 3}"#)
            .unwrap();
        let out = merge(os(&["glass", "mask", "--k", "8"]), &p).unwrap();
        let s: Vec<&str> = out.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(s, ["glass", "mask", "--k", "8", "--lambda", "0.25", "--tie-policy", "lower-index-ranks-higher"]);
    }

    #[test]
    fn config_path_forms() {
        assert_eq!(config_path(&os(&["glass", "nps", "--config", "a.json"])), Some(PathBuf::from("a.json")));
        assert_eq!(config_path(&os(&["glass", "--config=b.json", "nps"])), Some(PathBuf::from("b.json")));
        assert_eq!(config_path(&os(&["glass", "nps"])), None);
    }

    #[test]
    fn flat_keys_booleans_and_lists() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"with_oracle": true, "methods": ["local", "a-glass"], "topk": false}"#).unwrap();
        let out = merge(os(&["glass", "eval"]), &p).unwrap();
        let s: Vec<&str> = out.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(s, ["glass", "eval", "--methods", "local,a-glass", "--with-oracle"]);
    }
}
