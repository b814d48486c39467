//! `letf`: run twin experiments and parameter sweeps from TOML files.
//!
//! Exit codes: 0 on success, 1 if any experiment or output write failed,
//! 2 for invalid configurations or usage.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "letf", version, about = "Ensemble transform filter twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment or sweep described by a config file.
    Run {
        config: PathBuf,
        /// CSV file to append results to; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of sweep cells run concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Added to every seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Check a config file and print the effective settings.
    Validate {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
}

const CONFIG_ERROR: u8 = 2;

fn load(path: &PathBuf, seed_offset: u64) -> Result<config::Plan, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        output::report_io_error(&format!("reading {}", path.display()), &e);
        ExitCode::from(CONFIG_ERROR)
    })?;
    config::plan(&text, seed_offset).map_err(|e| {
        output::report_config_error(&e);
        ExitCode::from(CONFIG_ERROR)
    })
}

fn validate(path: &PathBuf, seed_offset: u64) -> ExitCode {
    let plan = match load(path, seed_offset) {
        Ok(p) => p,
        Err(code) => return code,
    };
    match toml::to_string(&plan.base) {
        Ok(text) => {
            println!("# {} experiment(s)", plan.cells.len());
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            output::report_io_error("rendering settings", &e);
            ExitCode::FAILURE
        }
    }
}

fn run(path: &PathBuf, out: Option<PathBuf>, workers: usize, seed_offset: u64) -> ExitCode {
    let plan = match load(path, seed_offset) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let mut writer = match output::open_sink(out.as_deref()) {
        Ok(w) => w,
        Err(e) => {
            output::report_io_error("opening output", &e);
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0usize;
    let written = sweep::run_cells(&plan.cells, workers, |cell, outcome| {
        if let Err(message) = &outcome {
            failed += 1;
            output::report_cell_failure(cell.index, &output::config_hash(&cell.settings), message);
        }
        writer
            .write_record(output::row(&cell.settings, &outcome))
            .and_then(|_| writer.flush().map_err(Into::into))
            .map_err(|e| e.to_string())
    });
    if let Err(e) = written {
        output::report_io_error("writing results", &e);
        return ExitCode::FAILURE;
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            workers,
            seed_offset,
        } => run(&config, out, workers, seed_offset),
        Command::Validate { config, seed_offset } => validate(&config, seed_offset),
    }
}
