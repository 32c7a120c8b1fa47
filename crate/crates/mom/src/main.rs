//! The `mom` binary: runs seeded collapse ensembles from JSON configs,
//! recomputes summaries from per-trial CSVs, and probes the scalar chaos
//! maps. Exit codes: 0 on success, 2 when a valid request fails during
//! execution, 3 for configuration mistakes.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mom::cli::{
    analyze_trials, orbit_report, parse_config, resolve_threads, run_ensemble, validate_config,
    write_histogram_file, write_outputs, CliError,
};

#[derive(Parser)]
#[command(name = "mom", version, about = "Collapse-by-attraction measurement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded ensemble described by a JSON config file.
    Run {
        /// Path to the JSON run description.
        config: PathBuf,
        /// Override the config's trial count.
        #[arg(long)]
        trials: Option<u64>,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output prefix.
        #[arg(long)]
        out: Option<String>,
        /// Worker threads (0 = automatic); the MOM_THREADS environment
        /// variable takes precedence.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Recompute summary statistics from a per-trial CSV.
    Analyze {
        /// Path to a trials CSV written by `mom run`.
        trials: PathBuf,
    },
    /// Iterate a scalar map ("phase" or "occupation") and report its
    /// exponent and invariant histogram.
    Orbit {
        /// Which map to iterate.
        map: String,
        /// Map strength.
        #[arg(long)]
        k: f64,
        /// Orbit length after the transient.
        #[arg(long, default_value_t = 100_000)]
        length: u64,
        /// Optional output prefix for the histogram CSV.
        #[arg(long)]
        out: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            trials,
            seed,
            out,
            threads,
        } => {
            let text = fs::read_to_string(&config).map_err(|source| CliError::ConfigIo {
                path: config.clone(),
                source,
            })?;
            let mut cfg = parse_config(&text)?;
            if let Some(trials) = trials {
                cfg.trials = trials;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            validate_config(&cfg)?;
            let threads = resolve_threads(threads)?;
            let output = run_ensemble(&cfg, threads)?;
            write_outputs(&output, &cfg.output)?;
            // The summary goes to stdout as well, so scripts can consume a
            // run without touching the artifact files.
            let text = serde_json::to_string_pretty(&output.summary)
                .expect("summary serialization cannot fail");
            println!("{text}");
            Ok(())
        }
        Command::Analyze { trials } => {
            let summary = analyze_trials(&trials)?;
            let text =
                serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail");
            println!("{text}");
            Ok(())
        }
        Command::Orbit {
            map,
            k,
            length,
            out,
        } => {
            let (report, histogram) = orbit_report(&map, k, length)?;
            if let Some(prefix) = out {
                let path = PathBuf::from(format!("{prefix}_hist.csv"));
                write_histogram_file(&histogram, &path)?;
            }
            let text =
                serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
            println!("{text}");
            Ok(())
        }
    }
}
