//! `--config file.json` support: the file's keys become flags placed ahead of the real
//! ones, so anything given on the command line overrides it.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use serde_json::Value;

fn config_path(argv: &[OsString]) -> anyhow::Result<Option<(usize, usize, PathBuf)>> {
    for (i, a) in argv.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            let p = argv.get(i + 1).context("--config needs a file path")?;
            return Ok(Some((i, 2, PathBuf::from(p))));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some((i, 1, PathBuf::from(p))));
        }
    }
    Ok(None)
}

fn flags_from_json(v: &Value) -> anyhow::Result<Vec<OsString>> {
    let Value::Object(map) = v else { bail!("config file must hold a flat JSON object") };
    let mut out = Vec::new();
    for (key, val) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match val {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            Value::String(s) => out.extend([flag.into(), s.into()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => Ok(s.clone()),
                        Value::Number(n) => Ok(n.to_string()),
                        _ => bail!("config key '{key}': list items must be numbers or strings"),
                    })
                    .collect::<anyhow::Result<_>>()?;
                out.extend([flag.into(), parts.join(",").into()]);
            }
            Value::Object(_) => bail!("config key '{key}': nested objects are not supported"),
        }
    }
    Ok(out)
}

/// Rewrite `argv` so the config file's flags sit right after the subcommand name.
pub fn argv_with_config(mut argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some((at, len, path)) = config_path(&argv)? else { return Ok(argv) };
    argv.drain(at..at + len);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let json: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let extra = flags_from_json(&json).with_context(|| format!("config {}", path.display()))?;
    // The subcommand is the first argument that is not a flag.
    let Some(sub) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(argv);
    };
    let insert_at = sub + 2;
    argv.splice(insert_at..insert_at, extra);
    Ok(argv)
}
