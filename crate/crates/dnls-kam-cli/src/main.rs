use clap::{Parser, Subcommand};
use dnls_kam_cli::commands::*;
use dnls_kam_cli::output::{to_json_pretty, OutDir};
use dnls_kam_cli::RunConfig;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit code for configuration and runtime errors.
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "dnls-kam", version, about = "KAM tori for the derivative NLS at finite truncation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`; default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every sampled quantity (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Comma-separated α values for `measure` (overrides `measure.alphas`).
    #[arg(long, global = true, value_delimiter = ',')]
    alpha_sweep: Option<Vec<f64>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the site set against the divisibility and sign conditions.
    Admissible,
    /// Realised constants of the nondegeneracy assumptions.
    Assumptions,
    /// Partial Birkhoff normal form with residual and symplecticity checks.
    NormalForm,
    /// Run the KAM iteration.
    Kam,
    /// Excluded measure over an α sweep.
    Measure,
    /// Sampled checks of the appendix inequalities.
    VerifyBounds,
}

fn emit<T: Serialize>(v: &T, code: i32) -> anyhow::Result<ExitCode> {
    print!("{}", to_json_pretty(v)?);
    Ok(ExitCode::from(code as u8))
}

fn real_main(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global()?;
    }
    let Some(path) = &cli.config else {
        anyhow::bail!("--config is required");
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let root = cli.out.clone().or_else(|| cfg.out_dir.clone().map(PathBuf::from)).unwrap_or_else(|| "out".into());
    let out = OutDir::create(&root)?;
    match cli.command {
        Command::Admissible => {
            let (v, c) = cmd_admissible(&cfg, &out)?;
            emit(&v, c)
        }
        Command::Assumptions => {
            let (v, c) = cmd_assumptions(&cfg, &out)?;
            emit(&v, c)
        }
        Command::NormalForm => {
            let (v, c) = cmd_normal_form(&cfg, &out)?;
            emit(&v, c)
        }
        Command::Kam => {
            let (v, c) = cmd_kam(&cfg, &out)?;
            emit(&v, c)
        }
        Command::Measure => {
            let (v, c) = cmd_measure(&cfg, cli.alpha_sweep.as_deref(), &out)?;
            emit(&v, c)
        }
        Command::VerifyBounds => {
            let (v, c) = cmd_verify_bounds(&cfg, &out)?;
            emit(&v, c)
        }
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
