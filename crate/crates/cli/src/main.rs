use std::process::ExitCode;

use fedlora_cli::args::{parse, Command, USAGE};
use fedlora_cli::runner::{execute_ablate, execute_compare, execute_run};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let command = match parse(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            eprintln!("run 'fedlora --help' for usage");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match command {
        Command::Help => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        Command::Run(config) => execute_run(&config).map(|_| ()),
        Command::Compare(config, strategies) => execute_compare(&config, &strategies).map(|_| ()),
        Command::Ablate(config) => execute_ablate(&config).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
