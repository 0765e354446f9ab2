//! `squash`: figure tables, validation and trajectory ensembles.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Format, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "squash", version, about = "Feedback squashing of a QND-monitored oscillator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stationary occupation n_eff against gain for each coupling in chi_list.
    Fig1(Common),
    /// Covariances and contour ellipses: vacuum, measured, with feedback.
    Fig2(Common),
    /// Run the acceptance checks; exits 1 if any fails.
    Validate(Common),
    /// Conditioned trajectories and their ensemble summary.
    Trajectories {
        #[command(flatten)]
        common: Common,
        /// Also write the photocurrent of every step.
        #[arg(long)]
        currents: bool,
    },
    /// Steady state of the truncated master equation next to the closed form.
    Steady(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides out_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// csv or json (overrides format).
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    /// Base seed (overrides seed).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(format) = self.format {
            cfg.format = format;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    let (common, currents) = match &cli.command {
        Command::Fig1(c) | Command::Fig2(c) | Command::Validate(c) | Command::Steady(c) => (c, false),
        Command::Trajectories { common, currents } => (common, *currents),
    };
    let cfg = common.resolve()?;
    let report = match cli.command {
        Command::Fig1(_) => commands::fig1(&cfg)?,
        Command::Fig2(_) => commands::fig2(&cfg)?,
        Command::Validate(_) => commands::validate(&cfg)?,
        Command::Trajectories { .. } => commands::trajectories(&cfg, currents)?,
        Command::Steady(_) => commands::steady(&cfg)?,
    };
    for table in &report.tables {
        let path = table.write(&cfg.out_dir, cfg.format)?;
        println!("wrote {}", path.display());
    }
    Ok(report.ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
