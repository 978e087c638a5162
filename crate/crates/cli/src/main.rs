use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use singsys::experiment::{emit_plot_data, list_presets, run_config, validate_config, WORKERS_ENV};
use singsys::Error;

/// Solver and verification harness for the singular Schrodinger-Maxwell system.
#[derive(Parser)]
#[command(name = "singsys", version, after_help = format!("Set {WORKERS_ENV} to bound the worker pool."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; exits 0 when every applicable gate passes, 1 otherwise.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write plot-ready CSV tables next to a completed run.
    PlotData { dir: PathBuf },
    /// Parse and check a config without solving anything.
    ValidateConfig { config: PathBuf },
    /// Print the coefficient presets accepted in configs.
    ListPresets,
}

const USAGE: u8 = 2;
const FAILURE: u8 = 1;

fn code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::UnknownPreset(_) | Error::IncompleteRun(_) => ExitCode::from(USAGE),
        _ => ExitCode::from(FAILURE),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output } => validate_config(&config).and_then(|cfg| {
            let dir = output.unwrap_or_else(|| cfg.output_dir.clone());
            let out = run_config(&cfg, &dir)?;
            print!("{}", out.report.table());
            println!("artifacts: {}", out.dir.display());
            if out.report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                let names: Vec<String> = out.report.failing().iter().map(|g| format!("{} [{}]", g.name, g.anchor)).collect();
                eprintln!("failing gates: {}", names.join(", "));
                Ok(ExitCode::from(FAILURE))
            }
        }),
        Command::PlotData { dir } => emit_plot_data(&dir).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }),
        Command::ValidateConfig { config } => validate_config(&config).map(|cfg| {
            println!("ok: {:?} experiment with {} point(s)", cfg.kind, cfg.points().len());
            ExitCode::SUCCESS
        }),
        Command::ListPresets => {
            for p in list_presets() {
                println!("{p}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        code_for(&e)
    })
}
