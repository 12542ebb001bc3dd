//! Generate seeded sinusoid-mixture and AR(2) series and write them as CSV.
//!
//! cargo run --example synth_series -- [out.csv]

use ictp::series::write_csv;
use ictp::synth::{generate_dataset, SynthFamily, SynthSpec};

fn summary(name: &str, values: &[f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let head: Vec<String> = values[..6].iter().map(|v| format!("{v:+.3}")).collect();
    println!("{name}: mean {mean:+.3} sd {sd:.3}  [{} ...]", head.join(", "));
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth.csv".into());

    let spec = SynthSpec { count: 4, ..Default::default() };
    let sines = generate_dataset(&spec, "sines")?;
    for c in &sines.channels {
        summary(&c.name, &c.values);
    }

    let ar = SynthSpec {
        family: SynthFamily::Ar2,
        count: 2,
        noise_sigma: 1.0,
        ..Default::default()
    };
    for c in &generate_dataset(&ar, "ar2")?.channels {
        summary(&format!("ar2 {}", c.name), &c.values);
    }

    write_csv(out.as_ref(), &sines)?;
    println!("wrote {out} ({} rows x {} channels)", sines.timestamps.len(), sines.channels.len());
    Ok(())
}
