mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> anyhow::Result<bool> {
    let o = &cli.overrides;
    let out = o.out.clone().unwrap_or_else(commands::default_out);
    if let Command::Verify(a) = &cli.command {
        return commands::verify(&out, a);
    }
    let cfg = o.resolve()?;
    match &cli.command {
        Command::SimulateComparisons(a) => commands::simulate(&cfg, &out, a)?,
        Command::Label(a) => commands::label(&cfg, &out, a)?,
        Command::Winsorize(a) => commands::winsorize(&cfg, &out, a)?,
        Command::Synth(a) => commands::synth(&cfg, &out, a)?,
        Command::Train(a) => commands::train(&cfg, &out, a)?,
        Command::Eval(a) => commands::eval(&cfg, &out, o, a)?,
        Command::Verify(_) => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
