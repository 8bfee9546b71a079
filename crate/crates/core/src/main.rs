use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use slm_forge::experiment::{run, ExperimentConfig, RunOptions};

/// Simulate stochastic volatility models before and after filtration
/// enlargement and measure their martingale defect.
#[derive(Parser, Debug)]
#[command(name = "slm-forge", version)]
struct Args {
    /// Experiment config (TOML, or JSON when the name ends in .json).
    #[arg(long)]
    config: PathBuf,
    /// Overrides numerics.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Exit with code 2 when the verdict is inconclusive.
    #[arg(long)]
    strict: bool,
    /// Write per-path CSV files under <out>/paths.
    #[arg(long)]
    dump_paths: bool,
    /// Output directory (falls back to [output] dir, then SLM_FORGE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions {
        seed: args.seed,
        threads: args.threads,
        strict: args.strict,
        dump_paths: args.dump_paths,
        out: args.out,
    };
    let result = ExperimentConfig::load(&args.config).and_then(|cfg| run(&cfg, &opts));
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(1)
        }
    }
}
