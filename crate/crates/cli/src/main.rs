//! `gazemae` command-line entrypoint.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod commands;
mod config;
mod viz;

use std::fmt;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use config::{Key, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<gazemae::Error> for CliError {
    fn from(e: gazemae::Error) -> Self {
        match e {
            gazemae::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

const SUBCOMMANDS: [(&str, &str); 5] = [
    ("pretrain", "Pre-train the masked video autoencoder"),
    ("finetune", "Fine-tune an encoder for phase recognition"),
    ("eval", "Score a fine-tuned checkpoint and print JSON metrics"),
    ("gen-synthetic", "Write a synthetic gaze-video dataset"),
    ("viz-mask", "Render heatmap and mask panels for one clip"),
];

fn subcommand(name: &'static str, about: &'static str, keys: &'static [Key]) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat `key = value` file; flags override it"),
    );
    for k in keys {
        let long: &'static str = Box::leak(config::flag_name(k.name).into_boxed_str());
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(long)
                .value_name("VALUE")
                .help(format!("{} [key: {}]", k.help, k.name)),
        );
    }
    cmd
}

fn cli() -> Command {
    let mut cmd = Command::new("gazemae")
        .about("Gaze-guided masked video autoencoding for surgical phase recognition")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true);
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(subcommand(name, about, config::keys_for(name)));
    }
    cmd
}

fn resolve(name: &str, matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let keys = config::keys_for(name);
    let file = match matches.get_one::<String>("config") {
        Some(path) => config::read(path.as_ref(), keys)?,
        None => RunConfig::new(),
    };
    let flags = keys
        .iter()
        .filter_map(|k| matches.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    config::resolve(name, file, flags)
}

fn run() -> Result<(), CliError> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { Err(CliError::Usage(String::new())) } else { Ok(()) };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = resolve(name, sub)?;
    match name {
        "pretrain" => commands::pretrain(&cfg),
        "finetune" => commands::finetune(&cfg),
        "eval" => commands::eval(&cfg),
        "gen-synthetic" => commands::gen_synthetic(&cfg),
        "viz-mask" => viz::run(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.to_string().is_empty() {
                eprintln!("error: {e}");
            }
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_every_key() {
        let mut root = cli();
        for (name, _) in SUBCOMMANDS {
            let help = root.find_subcommand_mut(name).unwrap().render_long_help().to_string();
            for k in config::keys_for(name) {
                assert!(help.contains(&format!("--{}", config::flag_name(k.name))), "{name}: {}", k.name);
            }
        }
    }

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }
}
