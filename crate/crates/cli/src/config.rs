//! `--config FILE`: `key=value` lines turned into command-line flags.
//! Keys are the long flag names (`_` and `-` are interchangeable); flags
//! given explicitly on the command line win.

use std::ffi::OsString;

use clap::{ArgAction, CommandFactory};

use crate::{Cli, CliError, CliResult};

fn config_path(argv: &[OsString]) -> CliResult<Option<OsString>> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned().map(Some).ok_or_else(|| CliError::Usage("--config needs a file".into()));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some(p.into()));
        }
    }
    Ok(None)
}

/// Position of the subcommand token, skipping global flags and their values.
fn subcommand_position(argv: &[OsString], names: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == "--config" || s == "--workers" {
            i += 2;
            continue;
        }
        if names.iter().any(|n| *n == s) {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_lines(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

pub fn merge_config_file(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&argv)? else { return Ok(argv) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.to_string_lossy())))?;
    let entries = parse_lines(&text)?;

    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let Some(pos) = subcommand_position(&argv, &names) else { return Ok(argv) };
    let sub_name = argv[pos].to_string_lossy().to_string();
    let sub = cmd.find_subcommand(&sub_name).expect("known subcommand");

    let explicit: Vec<String> = argv[pos + 1..]
        .iter()
        .filter_map(|a| a.to_string_lossy().strip_prefix("--").map(|s| s.split('=').next().unwrap_or("").to_string()))
        .collect();
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(CliError::Usage("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?} for command {sub_name}")))?;
        if explicit.contains(&key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                other => return Err(CliError::Usage(format!("config key {key}: expected true or false, got {other:?}"))),
            },
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(|s| s.into()).collect()
    }

    #[test]
    fn lines_and_comments() {
        let e = parse_lines("# c\n\nlr = 0.5\nbatch_size=4\n").unwrap();
        assert_eq!(e, vec![("lr".into(), "0.5".into()), ("batch-size".into(), "4".into())]);
        assert!(parse_lines("nonsense").is_err());
    }

    #[test]
    fn merge_respects_explicit_flags_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "epochs=5\nlr=0.1\n").unwrap();
        let p = path.to_str().unwrap();
        let out = merge_config_file(os(&["attreg", "--config", p, "train", "--data", "d", "--lr", "0.2"])).unwrap();
        let out: Vec<String> = out.iter().map(|s| s.to_string_lossy().into()).collect();
        assert_eq!(out, vec!["attreg", "--config", p, "train", "--epochs", "5", "--data", "d", "--lr", "0.2"]);

        std::fs::write(&path, "bogus=1\n").unwrap();
        assert!(matches!(merge_config_file(os(&["attreg", "--config", p, "train"])), Err(CliError::Usage(_))));
    }
}
