//! `smokesight`: calibration, alignment, synthetic data, training,
//! detection, evaluation and benchmarking from one binary.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! validation error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use smokesight::{Error, Result};

use config::{RunConfig, SUBCOMMANDS};
use manifest::RunManifest;

fn cli() -> Command {
    let mut app = Command::new("smokesight")
        .version(env!("CARGO_PKG_VERSION"))
        .about("IR + thermal human detection pipeline")
        .after_help(
            "Every subcommand reads its keys from the [<subcommand>] section of --config FILE \
             (top-level seed and out_dir apply to all), then from command-line flags. \
             Unknown keys are rejected. Each run writes <out_dir>/run_manifest.json.\n\
             Exit codes: 0 ok, 1 runtime or numerical failure, 2 usage or validation error.",
        )
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sc in SUBCOMMANDS {
        let mut cmd = Command::new(sc.name).about(sc.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("INI config file; keys of this subcommand go in its section"),
        );
        for k in sc.all_keys() {
            let help = match k.default {
                Some(d) => format!("{} [default: {d:?}]", k.help),
                None => format!("{} [required]", k.help),
            };
            cmd = cmd.arg(
                Arg::new(k.name)
                    .long(k.name.replace('_', "-"))
                    .value_name("VALUE")
                    .help(format!("{}: {help}", k.name)),
            );
        }
        app = app.subcommand(cmd);
    }
    app.subcommand(
        Command::new("replay")
            .about("Re-run the subcommand and config recorded in a run manifest")
            .arg(Arg::new("manifest").required(true).value_name("RUN_MANIFEST"))
            .arg(
                Arg::new("out_dir")
                    .long("out-dir")
                    .value_name("DIR")
                    .help("write outputs here instead of the recorded out_dir"),
            ),
    )
}

fn resolve(matches: &ArgMatches) -> Result<RunConfig> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    if name == "replay" {
        let path = PathBuf::from(sub.get_one::<String>("manifest").expect("required"));
        if !path.exists() {
            return Err(Error::Config(format!("{} does not exist", path.display())));
        }
        let m = RunManifest::load(&path)?;
        let cmd = config::subcommand(&m.subcommand)
            .ok_or_else(|| Error::Config(format!("manifest names unknown subcommand {:?}", m.subcommand)))?;
        let mut values: Vec<(String, String)> = m.config.into_iter().collect();
        if let Some(dir) = sub.get_one::<String>("out_dir") {
            values.push(("out_dir".into(), dir.clone()));
        }
        return RunConfig::resolve(cmd, None, &values);
    }
    let cmd = config::subcommand(name).expect("clap only accepts declared subcommands");
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    if let Some(f) = &file {
        if !f.exists() {
            return Err(Error::Config(format!("config file {} does not exist", f.display())));
        }
    }
    let overrides: Vec<(String, String)> = cmd
        .all_keys()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(cmd, file.as_deref(), &overrides)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match resolve(&matches).and_then(commands::dispatch) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
