use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use weakkam::cli::{exit_code, run_subcommand, ExperimentConfig, RunOptions, EXIT_CONFIG, SUBCOMMANDS};

/// Numerical weak KAM experiments on periodic grids.
#[derive(Parser, Debug)]
#[command(name = "weakkam", version)]
struct Args {
    /// One of: effective-action, weak-kam, discounted, select, mane, sweep-tau, sweep-delta, validate
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUBCOMMANDS))]
    subcommand: String,
    /// Experiment config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir and WEAKKAM_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for randomized checks
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(k) = args.threads {
        if k == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let out_dir = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("WEAKKAM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weakkam_out"));
    match run_subcommand(&args.subcommand, &cfg, &RunOptions { out_dir: out_dir.clone(), seed: args.seed }) {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            println!("artifacts written to {}", out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
