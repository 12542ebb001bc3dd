//! Pre-train on forecasting and imputation, then score the unseen backtrace
//! task with in-context demonstrations against the flip baseline.
//!
//! cargo run --release --example unseen_task -- [max_epochs] [seeds]

use ictp::config::RunConfig;
use ictp::eval::{improvement_ratio_over, Method, Metric};
use ictp::pipeline::{merge_reports, unseen_task_experiment};
use ictp::series::SeriesStore;
use ictp::synth::generate_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let mut cfg = RunConfig::default();
    cfg.train.max_epochs = epochs;
    cfg.seeds = (0..seeds).collect();

    let raw = generate_dataset(&cfg.synth, "synth")?;
    let store = SeriesStore::from_datasets(&[raw], cfg.to_json())?;
    let outcomes = unseen_task_experiment(&cfg, &store, |seed, e| {
        eprintln!("seed {seed} epoch {:>3}  train {:.4}  valid {:.4}", e.epoch, e.train_loss, e.valid_loss);
    })?;

    println!("seed  best  baseline  ictp(m={})  ictp(m=0)  ictp({} demos)", cfg.eval.demo_count, outcomes[0].wrong_task);
    for o in &outcomes {
        println!(
            "{:>4}  {:>4}  {:>8.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            o.seed,
            o.best_epoch,
            o.mse(Method::Baseline),
            o.mse(Method::Ictp),
            o.zero_shot_mse,
            o.wrong_context_mse
        );
    }
    let all = merge_reports(&outcomes);
    println!(
        "improvement over baseline (MSE): {:.1}%",
        100.0 * improvement_ratio_over(&all.rows, &[Metric::Mse])?
    );
    Ok(())
}
