//! The task adapters that let a backbone answer a task it was not built for,
//! shown on one window of a sine wave.
//!
//! cargo run --example baselines

use ictp::baseline::{adapter_for, apply};
use ictp::model::Variant;
use ictp::series::{ChannelSeries, Split};
use ictp::task::{generate, TaskKind, WindowSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let series = ChannelSeries {
        dataset: "wave".into(),
        channel: "x".into(),
        split: Split::Test,
        values: (0..200).map(|t| (t as f64 * 0.3).sin()).collect(),
        origin_offset: 0,
    };
    let w = WindowSpec::from_horizon(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for variant in [Variant::DecoderCausal, Variant::EncoderMasked] {
        for task in TaskKind::ALL {
            let Ok(kind) = adapter_for(variant, task) else {
                println!("{variant} / {task}: native, no adapter");
                continue;
            };
            let e = generate(task, &series, 40, w, &mut rng)?;
            let a = apply(kind, &e, 4)?;
            // A perfect backbone answers the adapted input with its true values.
            let mut perfect = vec![0.0; a.horizon];
            for (i, &r) in a.readout.iter().enumerate() {
                perfect[r] = e.target[i];
            }
            let back = a.map_predictions(&perfect)?;
            println!("{variant} / {task}: {kind:?}");
            println!("  adapted input {} tokens, horizon {}", a.tokens.len(), a.horizon);
            println!("  target     {}", fmt(&e.target));
            println!("  recovered  {}", fmt(&back));
        }
    }
    Ok(())
}
