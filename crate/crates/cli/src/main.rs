use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::{error, info, warn};

use rehearsal_core::harness::{emit_results, parse_config, run_grid, summarize, CellFilter};
use rehearsal_core::streams::{make_synthetic_gaussian, write_dataset_csv};

#[derive(Parser)]
#[command(
    name = "rehearsal",
    version,
    about = "Class-incremental rehearsal experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid and write result tables.
    Run {
        /// TOML experiment config.
        config: PathBuf,
        /// Output directory (overrides the config's `output.dir`).
        #[arg(long, env = "REHEARSAL_OUT_DIR")]
        out: Option<PathBuf>,
        /// Replace the seed list with 0..N.
        #[arg(long)]
        seeds: Option<u64>,
        /// Restrict the grid, e.g. `method=er,reg=im,budget=5`.
        #[arg(long)]
        filter: Option<CellFilter>,
    },
    /// Write a synthetic Gaussian dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

fn run(
    config: PathBuf,
    out: Option<PathBuf>,
    seeds: Option<u64>,
    filter: Option<CellFilter>,
) -> Result<ExitCode, (u8, anyhow::Error)> {
    let config_err = |e: anyhow::Error| (EXIT_CONFIG, e);
    let mut cfg = parse_config(&config)
        .with_context(|| format!("loading {}", config.display()))
        .map_err(config_err)?;
    if let Some(n) = seeds {
        if n == 0 {
            return Err(config_err(anyhow::anyhow!("--seeds must be ≥ 1")));
        }
        cfg.grid.seeds = (0..n).collect();
    }
    if let Some(f) = &filter {
        cfg.apply_filter(f).map_err(|e| config_err(e.into()))?;
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    info!("config fingerprint {}", cfg.fingerprint());
    info!("resolved config:\n{}", cfg.to_toml());

    let records = run_grid(&cfg).map_err(|e| config_err(e.into()))?;
    let files = emit_results(&records, &cfg.output.dir)
        .with_context(|| format!("writing results to {}", cfg.output.dir.display()))
        .map_err(|e| (EXIT_CONFIG, e))?;

    let summary = summarize(&records);
    for c in &summary.cells {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<6} {:<5} budget={:<4} n={} ACC={} ± {} FR={} ± {}",
            c.method.to_string(),
            c.regularizer.to_string(),
            c.budget,
            c.n,
            fmt(c.acc_mean),
            fmt(c.acc_std),
            fmt(c.fr_mean),
            fmt(c.fr_std)
        );
    }
    info!("wrote {}", files.results_csv.display());
    if summary.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &summary.failures {
            warn!(
                "failed cell {}/{}/budget={}/seed={}: {}",
                f.method, f.regularizer, f.budget, f.seed, f.error
            );
        }
        Ok(ExitCode::from(EXIT_PARTIAL))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            filter,
        } => run(config, out, seeds, filter),
        Command::Synth {
            classes,
            per_class,
            dim,
            spread,
            seed,
            out,
        } => make_synthetic_gaussian(classes, per_class, dim, spread, seed)
            .and_then(|d| write_dataset_csv(&d, &out))
            .map(|_| ExitCode::SUCCESS)
            .map_err(|e| (EXIT_CONFIG, e.into())),
    };
    match result {
        Ok(code) => code,
        Err((code, e)) => {
            error!("{e:#}");
            ExitCode::from(code)
        }
    }
}
