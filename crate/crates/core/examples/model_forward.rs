//! One forward pass of each backbone, and which patch outputs move when the
//! last input patch is edited.
//!
//! cargo run --example model_forward

use ictp::model::{Model, ModelConfig, Variant};
use ictp::task::Token;
use ictp_autodiff::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens: Vec<Token> = (0..24).map(|i| Token::observed((i as f64 * 0.4).sin())).collect();
    let mut edited = tokens.clone();
    for t in edited.iter_mut().skip(20) {
        t.value = rng.random_range(-3.0..3.0);
    }

    for variant in [Variant::DecoderCausal, Variant::EncoderMasked] {
        let config = ModelConfig { variant, ..Default::default() };
        let (model, params) = Model::init(config, &mut rng)?;
        let n: usize = params.iter().map(|p| p.tensor.len()).sum();
        let pred = model.predict_tokens(&params, &tokens, 12)?;
        let shown: Vec<String> = pred.iter().take(4).map(|v| format!("{v:+.3}")).collect();
        println!("{variant}: {} tensors, {n} weights, forecast [{} ...]", params.len(), shown.join(", "));

        let rows = |toks: &[Token]| -> Result<Vec<Vec<f64>>, Box<dyn std::error::Error>> {
            let mut tape = Tape::new(&params);
            let out = model.forward_patches(&mut tape, toks)?;
            let t = tape.value(out);
            let p = t.shape()[1];
            Ok(t.data().chunks(p).map(<[f64]>::to_vec).collect())
        };
        let (a, b) = (rows(&tokens)?, rows(&edited)?);
        let changed: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        println!("  editing patch {} changed the outputs of patches {changed:?}", a.len() - 1);
    }
    Ok(())
}
