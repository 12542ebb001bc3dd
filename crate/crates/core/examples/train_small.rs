//! Pre-train a small backbone on forecasting and imputation contexts and
//! print the loss curve.
//!
//! cargo run --release --example train_small -- [epochs]

use ictp::config::RunConfig;
use ictp::model::ModelConfig;
use ictp::pipeline::{build_datasets, train_model};
use ictp::series::SeriesStore;
use ictp::synth::{generate_dataset, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let mut cfg = RunConfig::default();
    cfg.synth = SynthSpec { count: 8, length: 1024, ..Default::default() };
    cfg.model = ModelConfig { d_model: 32, ..Default::default() };
    cfg.train.max_epochs = epochs;

    let store = SeriesStore::from_datasets(&[generate_dataset(&cfg.synth, "synth")?], cfg.to_json())?;
    let (train, valid, stats) = build_datasets(&store, &cfg.build_spec(0)?, cfg.build.valid_stride)?;
    println!("{} training samples ({stats:?}), {} validation samples", train.len(), valid.len());

    let (_, params, record) = train_model(&cfg, &train, &valid, 0, |e| {
        println!("epoch {:>3}  train {:.4}  valid {:.4}", e.epoch, e.train_loss, e.valid_loss);
    })?;
    println!(
        "best epoch {} (valid {:.4}), {:.1}s, parameter checksum {:016x}",
        record.best_epoch,
        record.best_valid_loss,
        record.wall_time_secs,
        params.checksum()
    );
    Ok(())
}
