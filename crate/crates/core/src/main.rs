use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ictp::config::{Overrides, RunConfig};
use ictp::pipeline;
use ictp::IctpError;

#[derive(Parser)]
#[command(name = "ictp", version, about = "In-context multi-task pre-training for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic series into <out>/data.
    Synth(Common),
    /// Load CSV data, split and normalize into <out>/store.json.
    Ingest(Common),
    /// Build the in-context training and validation sets per seed.
    Build(Common),
    /// Pre-train one model per seed.
    Train(Common),
    /// Score each seed's checkpoint on the held-out task.
    Eval(Common),
    /// Aggregate per-seed evaluations into report.csv and report.md.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds to run, repeatable (overrides the config).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Worker threads; the default uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Demonstrations per evaluation context.
    #[arg(long)]
    demo_count: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, IctpError> {
        let overrides = Overrides {
            output_dir: self.out.clone(),
            seeds: (!self.seeds.is_empty()).then(|| self.seeds.clone()),
            demo_count: self.demo_count,
            max_epochs: self.max_epochs,
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Synth(c)
        | Command::Ingest(c)
        | Command::Build(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::Report(c) => c,
    };
    if let Some(j) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("thread pool")?;
    }
    let cfg = common.resolve()?;
    match cli.command {
        Command::Synth(_) => {
            let path = pipeline::synth_stage(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Ingest(_) => {
            let store = pipeline::ingest_stage(&cfg)?;
            println!("ingested {} channels into {}", store.channels.len(), pipeline::store_path(&cfg).display());
        }
        Command::Build(_) => {
            let store = pipeline::load_store(&cfg)?;
            for &seed in &cfg.seeds {
                let s = pipeline::build_stage(&cfg, &store, seed)?;
                println!(
                    "seed {seed}: {} samples, {} skipped (precondition), {} skipped (demos)",
                    s.emitted, s.skipped_precondition, s.skipped_demos
                );
            }
        }
        Command::Train(_) => {
            for &seed in &cfg.seeds {
                let rec = pipeline::train_stage(&cfg, seed, |e| {
                    eprintln!("seed {seed} epoch {}: train {:.6} valid {:.6}", e.epoch, e.train_loss, e.valid_loss);
                })?;
                println!(
                    "seed {seed}: best epoch {} valid loss {:.6} ({:.1}s)",
                    rec.best_epoch, rec.best_valid_loss, rec.wall_time_secs
                );
            }
        }
        Command::Eval(_) => {
            let store = pipeline::load_store(&cfg)?;
            for &seed in &cfg.seeds {
                let report = pipeline::eval_stage(&cfg, &store, seed)?;
                for r in &report.rows {
                    println!("seed {seed} {} {} {}: mse {:.6} mae {:.6}", r.dataset, r.task, r.method, r.mse, r.mae);
                }
            }
        }
        Command::Report(_) => print!("{}", pipeline::report_stage(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<IctpError>().map_or(1, IctpError::exit_code);
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(code as u8)
        }
    }
}
