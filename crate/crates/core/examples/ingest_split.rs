//! Load a CSV, split every channel chronologically 70/10/20 and normalize
//! with statistics fitted on the training part.
//!
//! cargo run --example ingest_split -- [data.csv]

use ictp::series::{load_csv, write_csv, ColumnSpec, SeriesStore, Split};
use ictp::synth::{generate_dataset, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = dir.path().join("demo.csv");
            write_csv(&p, &generate_dataset(&SynthSpec { count: 3, ..Default::default() }, "demo")?)?;
            p
        }
    };

    let raw = load_csv(&path, &ColumnSpec::default())?;
    println!("{}: {} timestamps, {} channels", raw.name, raw.timestamps.len(), raw.channels.len());

    let store = SeriesStore::from_datasets(&[raw], serde_json::Value::Null)?;
    for ch in &store.channels {
        println!(
            "{:<12} train {:>5} valid {:>4} test {:>4}  mean {:+.3} std {:.3}",
            ch.train.channel,
            ch.train.len(),
            ch.valid.len(),
            ch.test.len(),
            ch.norm.mean,
            ch.norm.std
        );
    }
    for split in [Split::Train, Split::Test] {
        let s = &store.split(split)[0];
        let mean = s.values.iter().sum::<f64>() / s.len() as f64;
        println!("{split:?} of {}: normalized mean {mean:+.4}, starts at t={}", s.channel, s.origin_offset);
    }
    Ok(())
}
