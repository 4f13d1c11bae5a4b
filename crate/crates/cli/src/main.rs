use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mgrm_core::config::{load_config, validate, RunConfig};
use mgrm_core::pipeline;

#[derive(Parser)]
#[command(name = "mgrm", version, about = "Item recovery simulations for the multidimensional graded response model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate true parameters and response datasets.
    Generate(Flags),
    /// Calibrate every generated dataset by EM.
    Fit(Flags),
    /// Compute bias and RMSE against the generating parameters.
    Evaluate(Flags),
    /// Write results.csv, bias.svg and rmse.svg.
    Report(Flags),
    /// Run all stages in order.
    Run(Flags),
}

#[derive(Args)]
struct Flags {
    /// TOML configuration file; defaults reproduce the full study design.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the replication count (quick runs).
    #[arg(long)]
    reps: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite outputs of a stage that already ran.
    #[arg(long)]
    force: bool,
}

impl Flags {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(r) = self.reps {
            cfg.design.n_reps = r;
        }
        if let Some(s) = self.seed {
            cfg.design.master_seed = s;
        }
        cfg.force = self.force;
        validate(&cfg)?;
        Ok(cfg)
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(f) => {
            let m = pipeline::generate(&f.resolve()?)?;
            eprintln!("generated {} datasets", m.records.len());
        }
        Command::Fit(f) => {
            let m = pipeline::fit_all(&f.resolve()?)?;
            let failed = m.records.iter().filter(|r| r.error.is_some()).count();
            let nonconv = m.records.iter().filter(|r| r.converged == Some(false)).count();
            eprintln!(
                "fitted {} datasets ({failed} failed, {nonconv} not converged)",
                m.records.len()
            );
        }
        Command::Evaluate(f) => {
            let summary = pipeline::evaluate(&f.resolve()?)?;
            eprintln!("evaluated {} conditions", summary.len());
        }
        Command::Report(f) => {
            let cfg = f.resolve()?;
            let table = pipeline::report(&cfg)?;
            print!("{}", table.to_csv_string());
        }
        Command::Run(f) => {
            let cfg = f.resolve()?;
            pipeline::run_pipeline(&cfg)?;
            let table = mgrm_core::report::read_results_csv(&cfg.out_dir.join(pipeline::RESULTS))?;
            print!("{}", table.to_csv_string());
        }
    }
    Ok(())
}
