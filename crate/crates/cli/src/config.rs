//! `key = value` config files merged beneath explicit command-line flags.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", n + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn flag_name(arg: &str) -> Option<&str> {
    let name = arg.strip_prefix("--")?;
    Some(name.split_once('=').map_or(name, |(k, _)| k))
}

/// Rewrites `args` so that every config key not given explicitly becomes a
/// flag. The `--config` option itself is removed. Booleans are written as
/// `key = true` (or `false`, which omits the flag).
pub fn merge(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a file argument")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config file {path}"))?;
    let given: HashSet<String> = rest.iter().filter_map(|a| flag_name(a)).map(str::to_string).collect();
    for (key, value) in parse(&text)? {
        if given.contains(&key) {
            continue;
        }
        match value.as_str() {
            "true" => rest.push(format!("--{key}")),
            "false" => {}
            _ => {
                rest.push(format!("--{key}"));
                rest.push(value);
            }
        }
    }
    Ok(rest)
}
