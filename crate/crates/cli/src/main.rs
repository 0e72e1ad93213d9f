//! `shadowprice` command-line driver.
//!
//! Exit status: 0 on success, 1 when a verification fails or a run cannot
//! complete, 2 on usage errors.

mod commands;
mod config;
mod output;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches};

use commands::Cli;
use output::{manifest_path, to_json, write_artifact, ManifestCore, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Clap(#[from] clap::Error),
    #[error(transparent)]
    Core(#[from] shadowprice::Error),
    #[error("cannot write {0}")]
    Output(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Clap(e) => e.exit_code() as u8,
            Self::Core(shadowprice::Error::Domain(_) | shadowprice::Error::Input(_)) => 2,
            _ => 1,
        }
    }
}

/// Resolved options of the subcommand, without the output location.
fn parameters(cmd: &clap::Command, matches: &clap::ArgMatches) -> BTreeMap<String, String> {
    let Some((name, sub)) = matches.subcommand() else {
        return BTreeMap::new();
    };
    let Some(sub_cmd) = cmd.find_subcommand(name) else {
        return BTreeMap::new();
    };
    sub_cmd
        .get_arguments()
        .map(|a| a.get_id().as_str())
        .filter(|id| !matches!(*id, "config" | "out_dir" | "help" | "version"))
        .filter_map(|id| {
            let raw = sub.get_raw(id)?;
            let v: Vec<String> = raw.map(|s| s.to_string_lossy().into_owned()).collect();
            Some((id.replace('_', "-"), v.join(",")))
        })
        .collect()
}

fn run(argv: Vec<OsString>) -> Result<bool, CliError> {
    let start = Instant::now();
    let cmd = Cli::command();
    let (matches, notes) = config::resolve(&cmd, argv)?;
    for n in &notes {
        eprintln!("note: {n}");
    }
    let cli = Cli::from_arg_matches(&matches)?;
    let name = cli.command.name();
    let params = parameters(&cmd, &matches);
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| CliError::Output(format!("{}: {e}", cli.out_dir.display())))?;
    let core = ManifestCore {
        subcommand: name.to_string(),
        seed: params.get("seed").and_then(|s| s.parse().ok()),
        parameters: params,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: cli.command.outputs(),
    };
    let hash = core.hash()?;
    let result = cli.command.run()?;
    for a in &result.artifacts {
        let path = write_artifact(&cli.out_dir, &hash, a)?;
        println!("wrote {}", path.display());
    }
    for line in &result.summary {
        println!("{line}");
    }
    let manifest = RunManifest {
        core: &core,
        manifest_sha256: &hash,
        argv: core.argv(),
        notes: &notes,
        verified: result.verified,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let path = manifest_path(&cli.out_dir, name);
    std::fs::write(&path, to_json(&manifest)?).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    println!("manifest {} sha256 {hash}", path.display());
    Ok(result.verified)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            ExitCode::from(e.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
