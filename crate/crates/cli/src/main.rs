use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use proofchannels_core::peer::LogLevel;
use proofchannels_core::scenario::{self, Report, BUILTINS};

#[derive(Parser)]
#[command(
    name = "proofchannels",
    version,
    about = "Run proof-bet payment channel scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or `builtin:<name>` and print its report.
    Run {
        scenario: String,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event log here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Lowest log level shown: debug, info or warn.
        #[arg(long, default_value = "info")]
        log_level: LogLevel,
    },
    /// List the built-in scenarios.
    List,
    /// Parse and validate a scenario without running it.
    Check { scenario: String },
}

const EXIT_VIOLATION: u8 = 1;
const EXIT_BAD_INPUT: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_BAD_INPUT)
        }
    }
}

fn execute(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::List => {
            for (name, _) in BUILTINS {
                let s = scenario::builtin(name)?;
                println!("{name:<28} {}", s.summary);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { scenario } => {
            let s = scenario::load(&scenario)?;
            println!("ok: {} ({} directives)", s.name, s.script.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            scenario,
            seed,
            out,
            log_level,
        } => {
            let s = scenario::load(&scenario)?;
            let report = scenario::run(&s, seed)?;
            let log = report.render_log(log_level);
            match out {
                Some(path) => std::fs::write(&path, log)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{log}"),
            }
            print!("{}", report.render());
            Ok(ExitCode::from(exit_status(&report)))
        }
    }
}

fn exit_status(report: &Report) -> u8 {
    if report.passed() {
        0
    } else {
        EXIT_VIOLATION
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_check_maps_to_violation_status() {
        let mut report = scenario::run(&scenario::builtin("open-close").unwrap(), None).unwrap();
        assert_eq!(exit_status(&report), 0);
        report
            .checks
            .push(("conservation".into(), Err("1 burned".into())));
        assert_eq!(exit_status(&report), EXIT_VIOLATION);
        assert!(report.render().contains("  conservation FAIL 1 burned\n"));
    }
}
