//! Compare the tape's gradients of the full model loss with central
//! differences, for both backbones.
//!
//! cargo run --release --example gradient_check

use ictp::context::{IclSample, Provenance};
use ictp::model::{Model, ModelConfig, Variant};
use ictp::series::Split;
use ictp::task::{SourceSpan, TaskKind, Token};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let span = SourceSpan {
        dataset: "toy".into(),
        channel: "x".into(),
        split: Split::Train,
        start: 0,
        end: 12,
        origin: 0,
    };
    for variant in [Variant::DecoderCausal, Variant::EncoderMasked] {
        let config = ModelConfig {
            variant,
            patch_size: 2,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 2,
            max_tokens: 64,
        };
        let (model, mut params) = Model::init(config, &mut rng)?;
        let sample = IclSample {
            task: TaskKind::Forecast,
            tokens: (0..8).map(|_| Token::observed(rng.random_range(-1.0..1.0))).collect(),
            target: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            provenance: Provenance { query: span.clone(), demos: vec![] },
        };
        let r = model.check_gradients(&mut params, &sample, 1e-4, 1e-6)?;
        println!(
            "{variant}: {} elements checked, {} skipped, max relative error {:.2e}, max absolute error {:.2e}",
            r.checked, r.skipped, r.max_rel_error, r.max_abs_error
        );
    }
    Ok(())
}
