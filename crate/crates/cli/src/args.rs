//! Hand-rolled flag parsing for the three subcommands.
//!
//! Precedence, lowest to highest: built-in defaults, `--config` file,
//! `FEDLORA_*` environment variables, command-line flags.

use std::path::Path;

use fedlora_core::server::Strategy;

use crate::config::ExperimentConfig;
use crate::runner::CliError;

pub const USAGE: &str = "\
fedlora — federated low-rank diffusion-adapter training simulator

USAGE:
    fedlora run     [OPTIONS]    run one experiment
    fedlora compare [OPTIONS] --strategies <a,b,...>
                                 run several strategies under a matched protocol
    fedlora ablate  [OPTIONS]    run the five-variant ablation matrix

OPTIONS (all subcommands):
    --config <PATH>            config file (key = value with [sections])
    --seed <N>                 run seed
    --rounds <N>               federation rounds
    --strategy <S>             fedavg | fedprox | isfa
    --gamma <F>                ISFA weighting sharpness
    --clip-norm <F>            DP clipping norm C
    --noise-multiplier <F>     DP noise multiplier sigma
    --secure-agg <BOOL>        pairwise-masking secure aggregation on/off
    --client-fraction <F>      fraction of clients sampled per round
    --out <DIR>                output directory

Environment overrides: FEDLORA_SEED, FEDLORA_OUT_DIR, and
FEDLORA_<SECTION>__<KEY> (for example FEDLORA_FEDERATION__GAMMA=2).
";

/// A parsed invocation.
#[derive(Debug)]
pub enum Command {
    Run(ExperimentConfig),
    Compare(ExperimentConfig, Vec<Strategy>),
    Ablate(ExperimentConfig),
    Help,
}

fn flag_target(flag: &str) -> Option<(&'static str, &'static str)> {
    match flag {
        "--seed" => Some(("", "seed")),
        "--out" => Some(("", "out_dir")),
        "--rounds" => Some(("federation", "rounds")),
        "--strategy" => Some(("federation", "strategy")),
        "--gamma" => Some(("federation", "gamma")),
        "--client-fraction" => Some(("federation", "client_fraction")),
        "--secure-agg" => Some(("federation", "secure_agg")),
        "--clip-norm" => Some(("dp", "clip_norm")),
        "--noise-multiplier" => Some(("dp", "noise_multiplier")),
        _ => None,
    }
}

pub fn parse(args: &[String]) -> Result<Command, CliError> {
    let Some(subcommand) = args.first() else {
        return Ok(Command::Help);
    };
    if subcommand == "--help" || subcommand == "-h" || subcommand == "help" {
        return Ok(Command::Help);
    }
    if !matches!(subcommand.as_str(), "run" | "compare" | "ablate") {
        return Err(CliError::Usage(format!("unknown subcommand '{subcommand}'")));
    }

    // First pass: find --config so file values sit below env and flags.
    let mut config_path: Option<&str> = None;
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--config" {
            config_path =
                Some(args.get(i + 1).ok_or_else(|| CliError::Usage("--config needs a path".into()))?);
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut config = match config_path {
        Some(path) => ExperimentConfig::from_file(Path::new(path))?,
        None => ExperimentConfig::default(),
    };
    config.apply_env()?;

    let mut strategies: Option<Vec<Strategy>> = None;
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let take_value = || {
            args.get(i + 1)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{flag} needs a value")))
        };
        if flag == "--help" || flag == "-h" {
            return Ok(Command::Help);
        }
        if flag == "--config" {
            take_value()?;
        } else if flag == "--strategies" {
            if subcommand != "compare" {
                return Err(CliError::Usage("--strategies only applies to compare".into()));
            }
            let list = take_value()?;
            let parsed: Result<Vec<Strategy>, _> =
                list.split(',').map(|s| Strategy::parse(s.trim())).collect();
            strategies = Some(parsed.map_err(|e| CliError::Usage(e.to_string()))?);
        } else if let Some((section, key)) = flag_target(flag) {
            let value = take_value()?;
            config.set_key(section, key, &value, &format!("flag {flag}"))?;
        } else {
            return Err(CliError::Usage(format!("unknown flag '{flag}'")));
        }
        i += 2;
    }

    match subcommand.as_str() {
        "run" => Ok(Command::Run(config)),
        "ablate" => Ok(Command::Ablate(config)),
        "compare" => {
            let strategies = strategies
                .ok_or_else(|| CliError::Usage("compare requires --strategies".into()))?;
            Ok(Command::Compare(config, strategies))
        }
        _ => unreachable!(),
    }
}
