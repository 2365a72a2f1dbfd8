//! `--config` files: a JSON object whose keys are the subcommand's long flags
//! (`batch_size` or `batch-size`). Values are spliced into the argument list right after the
//! subcommand, and a flag also given on the command line is taken from there instead.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};
use clap::CommandFactory;
use serde_json::Value;

use crate::args::Cli;

/// Position just past the innermost subcommand name, and the `--config` path if present.
fn scan(argv: &[OsString]) -> (usize, Option<OsString>) {
    let mut cmd = Cli::command();
    let mut insert = argv.len().min(1);
    let mut config = None;
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].to_string_lossy();
        if tok == "--" {
            break;
        }
        if let Some(v) = tok.strip_prefix("--config=") {
            config = Some(OsString::from(v));
        } else if tok == "--config" {
            config = argv.get(i + 1).cloned();
            i += 1;
        } else if !tok.starts_with('-') {
            match cmd.find_subcommand(tok.as_ref()).cloned() {
                Some(sub) => {
                    cmd = sub;
                    insert = i + 1;
                }
                None if cmd.has_subcommands() => break,
                None => {}
            }
        }
        i += 1;
    }
    (insert, config)
}

fn given_flags(argv: &[OsString]) -> HashSet<String> {
    argv.iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--").map(|f| f.split('=').next().unwrap_or(f).to_string()))
        .collect()
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn expand(obj: &serde_json::Map<String, Value>, skip: &HashSet<String>) -> anyhow::Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in obj {
        let flag = key.replace('_', "-");
        if flag == "config" {
            bail!("config files cannot name another config file");
        }
        if skip.contains(&flag) {
            continue;
        }
        match value {
            Value::Bool(true) => out.push(format!("--{flag}").into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) if items.iter().all(Value::is_number) => {
                let joined: Vec<String> = items.iter().filter_map(scalar).collect();
                out.push(format!("--{flag}={}", joined.join(",")).into());
            }
            Value::Array(items) => {
                for item in items {
                    let s = scalar(item).with_context(|| format!("config key '{key}' holds a non-scalar list item"))?;
                    out.push(format!("--{flag}={s}").into());
                }
            }
            other => {
                let s = scalar(other).with_context(|| format!("config key '{key}' must be a string, number, bool or list"))?;
                out.push(format!("--{flag}={s}").into());
            }
        }
    }
    Ok(out)
}

/// The argument list with config-file flags merged in. Errors are usage errors.
pub fn apply(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let (insert, config) = scan(&argv);
    let Some(path) = config else { return Ok(argv) };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("cannot read config {}", Path::new(&path).display()))?;
    let value: Value = serde_json::from_str(&text).context("config is not valid JSON")?;
    let Value::Object(obj) = value else { bail!("config must be a JSON object") };
    let extra = expand(&obj, &given_flags(&argv))?;
    let mut out = argv;
    out.splice(insert..insert, extra);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn inserts_after_leaf_subcommand() {
        let (pos, cfg) = scan(&os(&["voxmat", "--quiet", "matvae", "train", "x.csv", "--config", "c.json"]));
        assert_eq!(pos, 4);
        assert_eq!(cfg, Some("c.json".into()));
        assert_eq!(scan(&os(&["voxmat", "lift", "--voxels", "v"])).0, 2);
    }

    #[test]
    fn command_line_flags_win() {
        let obj = serde_json::json!({"epochs": 5, "batch_size": 8, "naive": true, "maps": ["a", "b"], "f": [1, 0, 0]});
        let skip: HashSet<String> = ["epochs".to_string()].into();
        let got = expand(obj.as_object().unwrap(), &skip).unwrap();
        let got: Vec<String> = got.into_iter().map(|s| s.into_string().unwrap()).collect();
        assert!(!got.iter().any(|s| s.starts_with("--epochs")));
        assert!(got.contains(&"--batch-size=8".to_string()));
        assert!(got.contains(&"--naive".to_string()));
        assert!(got.contains(&"--maps=a".to_string()) && got.contains(&"--maps=b".to_string()));
        assert!(got.contains(&"--f=1,0,0".to_string()));
    }
}
