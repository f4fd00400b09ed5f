//! Experiment command line: synthetic data export, heat-map grids, kernel
//! bank sweeps, penalty comparisons, the ratings-data pipeline, and the
//! reference certification suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bilearn::cli::{
    run_certify, run_compare_penalties, run_grid, run_mkl, run_synth_gen, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "bilearn",
    version,
    about = "Bilinear operator learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Config file of `key = value` lines; later flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (a CSV file, or a directory for synth-gen).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 means one per core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write triplets plus attribute CSVs.
    SynthGen(CommonOpts),
    /// Cross-validated RMSE heat map over the (eta, zeta) kernel grid.
    Grid(CommonOpts),
    /// Four-corner kernel bank sweep over the lambda list.
    Mkl(CommonOpts),
    /// Trace vs fixed-rank penalty comparison on identical folds.
    ComparePenalties(CommonOpts),
    /// Ratings-data pipeline: subsampled grid run on a MovieLens directory.
    Movielens {
        /// Directory holding u.data, u.item, and u.user.
        #[arg(long)]
        dir: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the reference certification suite and report PASS/FAIL per check.
    Certify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn build_config(base: ExperimentConfig, opts: &CommonOpts) -> Result<ExperimentConfig, String> {
    let mut cfg = base;
    if let Some(path) = &opts.config {
        cfg.apply_file(path).map_err(|e| e.to_string())?;
    }
    for kv in &opts.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.apply_kv(key.trim(), value.trim())
            .map_err(|e| e.to_string())?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out = out.clone();
    }
    if let Some(workers) = opts.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::SynthGen(opts) => {
            let cfg = build_config(ExperimentConfig::default(), &opts)?;
            let paths = run_synth_gen(&cfg).map_err(|e| e.to_string())?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Grid(opts) => {
            let cfg = build_config(ExperimentConfig::default(), &opts)?;
            let rows = run_grid(&cfg).map_err(|e| e.to_string())?;
            println!("wrote {} ({} rows)", cfg.out.display(), rows.len());
        }
        Command::Mkl(opts) => {
            let cfg = build_config(ExperimentConfig::default(), &opts)?;
            let rows = run_mkl(&cfg).map_err(|e| e.to_string())?;
            println!("wrote {} ({} rows)", cfg.out.display(), rows.len());
        }
        Command::ComparePenalties(opts) => {
            let cfg = build_config(ExperimentConfig::default(), &opts)?;
            let rows = run_compare_penalties(&cfg).map_err(|e| e.to_string())?;
            println!("wrote {} ({} rows)", cfg.out.display(), rows.len());
        }
        Command::Movielens { dir, common } => {
            let cfg = build_config(ExperimentConfig::movielens_defaults(dir), &common)?;
            let rows = run_grid(&cfg).map_err(|e| e.to_string())?;
            println!("wrote {} ({} rows)", cfg.out.display(), rows.len());
        }
        Command::Certify { seed } => {
            let outcomes = run_certify(seed).map_err(|e| e.to_string())?;
            let mut failed = 0;
            for o in &outcomes {
                let tag = if o.pass { "PASS" } else { "FAIL" };
                println!("{tag} {}", o.name);
                failed += usize::from(!o.pass);
            }
            if failed > 0 {
                return Err(format!("{failed} of {} checks failed", outcomes.len()));
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
