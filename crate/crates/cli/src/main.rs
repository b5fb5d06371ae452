mod commands;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use spanrel::config::RunConfig;
use spanrel::{Error, Result};

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .global(true)
            .help("Flat key = value config file; flags override it"),
        Arg::new("show-config")
            .long("show-config")
            .action(ArgAction::SetTrue)
            .global(true)
            .help("Print the resolved config as canonical JSON and exit"),
    ];
    for key in RunConfig::keys() {
        args.push(
            Arg::new(key.clone())
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .global(true)
                .help_heading("Config"),
        );
    }
    args
}

fn cli() -> Command {
    Command::new("spanrel")
        .about("Span-based entity and relation extraction")
        .subcommand_required(true)
        .args(config_args())
        .subcommand(
            Command::new("gen-data")
                .about("Write a seeded synthetic corpus as train/dev/test JSON-lines")
                .arg(Arg::new("out-dir").long("out-dir").required(true))
                .arg(Arg::new("docs").long("docs").default_value("200").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("dev-docs").long("dev-docs").default_value("40").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("test-docs").long("test-docs").default_value("0").value_parser(clap::value_parser!(usize))),
        )
        .subcommand(Command::new("train-entity").about("Train the entity model (or both models with shared_encoder)"))
        .subcommand(Command::new("train-relation").about("Train the relation model"))
        .subcommand(
            Command::new("predict")
                .about("Run entity then relation prediction over test_path")
                .arg(
                    Arg::new("mode")
                        .long("mode")
                        .default_value("full")
                        .value_parser(["full", "approx"]),
                ),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Score a prediction file, or compare two")
                .arg(Arg::new("pred").long("pred").required(true))
                .arg(Arg::new("gold").long("gold").conflicts_with("compare"))
                .arg(Arg::new("compare").long("compare").value_name("OTHER_PRED")),
        )
        .subcommand(
            Command::new("check-equivalence")
                .about("Randomized exactness checks of batched marker inference")
                .arg(Arg::new("cases").long("cases").default_value("200").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("max-window").long("max-window").default_value("60").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("max-pairs").long("max-pairs").default_value("12").value_parser(clap::value_parser!(usize))),
        )
        .subcommand(
            Command::new("bench")
                .about("Relation inference throughput, full vs approx, on gold entities")
                .arg(Arg::new("runs").long("runs").default_value("3").value_parser(clap::value_parser!(usize))),
        )
        .subcommand(
            Command::new("sweep-window")
                .about("Train and evaluate over several context window sizes")
                .arg(Arg::new("windows").long("windows").default_value("bare,100,200,300")),
        )
}

/// Config file then flags, layered on `base`.
pub(crate) fn resolve_config(base: RunConfig, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
            let mut pairs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{path}:{}: expected `key = value`", i + 1)))?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
            base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?
        }
        None => base,
    };
    let keys = RunConfig::keys();
    let flags: Vec<(&str, &str)> = keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.as_str(), v.as_str())))
        .collect();
    if !flags.is_empty() {
        cfg = cfg.with_overrides(flags)?;
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let matches = cli().try_get_matches().map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        Error::Usage(e.to_string())
    })?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    commands::dispatch(name, sub)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
