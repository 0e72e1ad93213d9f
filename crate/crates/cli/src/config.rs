//! `key=value` config files merged beneath command-line flags.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};

use crate::CliError;

/// Non-empty lines of `key=value`; `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key=value, got {line:?}", n + 1)));
        };
        let (k, v) = (k.trim().trim_start_matches("--"), v.trim());
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses `argv`, then fills every option not given as a flag from the
/// config file named by `--config`. A flag that disagrees with the file wins
/// and the disagreement is returned as a note.
pub fn resolve(cmd: &Command, argv: Vec<OsString>) -> Result<(ArgMatches, Vec<String>), CliError> {
    let first = cmd.clone().try_get_matches_from(&argv)?;
    let Some(path) = first.get_one::<std::path::PathBuf>("config").cloned() else {
        return Ok((first, Vec::new()));
    };
    let entries = read(&path)?;
    let Some((name, sub)) = first.subcommand() else {
        return Ok((first, Vec::new()));
    };
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut extra: Vec<OsString> = Vec::new();
    let mut notes = Vec::new();
    for (key, value) in entries {
        let arg = sub_cmd
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("config key {key:?} is not an option of {name}")))?;
        if key == "config" {
            return Err(CliError::Usage("config files cannot name another config file".into()));
        }
        let id = arg.get_id().as_str();
        if sub.value_source(id) == Some(ValueSource::CommandLine) {
            let given: Vec<String> = sub
                .get_raw(id)
                .map(|v| v.map(|s| s.to_string_lossy().into_owned()).collect())
                .unwrap_or_default();
            let given = given.join(",");
            if given != value {
                notes.push(format!("--{key}={given} overrides {key}={value} from {}", path.display()));
            }
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(CliError::Usage(format!("config key {key} expects true or false, got {value:?}"))),
            },
            _ => extra.push(format!("--{key}={value}").into()),
        }
    }
    let mut argv = argv;
    argv.extend(extra);
    let merged = cmd.clone().try_get_matches_from(&argv)?;
    Ok((merged, notes))
}

fn read(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let got = parse("# header\nhurst = 0.7\n\n--seed=3 # trailing\n").unwrap();
        assert_eq!(got, vec![("hurst".into(), "0.7".into()), ("seed".into(), "3".into())]);
        assert!(parse("hurst 0.7").is_err());
        assert!(parse("=1").is_err());
    }
}
