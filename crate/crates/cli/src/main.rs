use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use scpi_core::constraints::RawConstraint;

use scpi_cli::{report, CliError, RunConfig};

/// Synthetic control weights and prediction intervals for a treated unit.
#[derive(Debug, Parser)]
#[command(name = "scpi", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Data file; overrides `data.path` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulation draws.
    #[arg(long)]
    sims: Option<usize>,
    /// Worker threads for the simulation.
    #[arg(long)]
    cores: Option<usize>,
    /// Constraint preset (simplex, lasso, ridge, ols, L1-L2); repeatable.
    /// Replaces the constraints listed in the config.
    #[arg(long = "constraint")]
    constraints: Vec<String>,
    /// Also compute simultaneous intervals over all post periods.
    #[arg(long)]
    joint: bool,
    #[arg(long)]
    quiet: bool,
}

fn configure(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(d) = &args.data {
        cfg.data.path = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.uncertainty.seed = s;
    }
    if let Some(s) = args.sims {
        cfg.uncertainty.sims = s;
    }
    if let Some(c) = args.cores {
        cfg.uncertainty.cores = c;
    }
    if !args.constraints.is_empty() {
        cfg.constraints = args.constraints.iter().map(|n| RawConstraint::named(n)).collect();
    }
    if args.joint {
        cfg.uncertainty.joint = true;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = configure(&args).and_then(|cfg| {
        let bundle = scpi_cli::run(&cfg)?;
        report::write_outputs(&bundle, &cfg.output).map(|paths| (bundle, paths))
    });
    match result {
        Ok((bundle, paths)) => {
            if !args.quiet {
                for r in &bundle.results {
                    for w in &r.warnings {
                        eprintln!("warning [{}]: {w}", r.label);
                    }
                }
                for p in paths {
                    println!("wrote {}", p.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("scpi: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
