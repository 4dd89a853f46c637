use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use dualzsl_cli::commands::{
    cmd_gen, cmd_project, cmd_report, cmd_run, cmd_sweep_lambda, default_projection_path, load_config, run_dir,
};
use dualzsl_cli::config::CONFIG_ENV;
use dualzsl_cli::pipeline::Regime;

#[derive(Parser)]
#[command(name = "dualzsl", version, about = "Dual-channel feature learning for generalized zero-shot classification")]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Override one configuration entry, e.g. `--set train.lambda=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Gen,
    /// Train and evaluate one regime.
    Run {
        #[arg(long, value_parser = parse_regime)]
        regime: Regime,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory; defaults to `<output>/<regime>/seed-<N>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run reports into one table with improvement rates.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Run one regime over a grid of λ values.
    SweepLambda {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2,4")]
        grid: Vec<f64>,
        #[arg(long, value_parser = parse_regime, default_value = "high")]
        regime: Regime,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Recompute the 2-D projection of test features from a run's checkpoint.
    Project {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| format!("unknown regime `{s}` (baseline, low, middle, high)"))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Gen => println!("{}", cmd_gen(&cfg)?),
        Command::Run { regime, seed, out } => {
            let dir = out.unwrap_or_else(|| run_dir(&cfg, regime, seed));
            let r = cmd_run(&cfg, regime, seed, &dir)?.report;
            println!(
                "{regime}\tAs {:.1}\tAu {:.1}\tH {:.1}\t-> {}",
                r.seen_accuracy,
                r.unseen_accuracy,
                r.harmonic_mean,
                dir.display()
            );
        }
        Command::Report { dirs } => print!("{}", cmd_report(&dirs)?),
        Command::SweepLambda { grid, regime, seed } => {
            if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(anyhow!("λ values must be finite and nonnegative"));
            }
            print!("{}", cmd_sweep_lambda(&cfg, &grid, regime, seed)?)
        }
        Command::Project { run, out } => {
            let dest = out.unwrap_or_else(|| default_projection_path(&run));
            cmd_project(&cfg, &run, &dest)?;
            println!("{}", dest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
