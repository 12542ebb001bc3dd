//! Patch-transformer backbones.
//!
//! Both variants consume a token stream that ends with `h` placeholder steps
//! (value 0, masked, answer flag set), split it into non-overlapping patches of
//! `p` steps, project each patch's `3p` features to `d_model`, add sinusoidal
//! positions and run pre-norm transformer blocks. They differ in attention
//! and readout:
//!
//! * [`Variant::DecoderCausal`]: patch `i` attends to patches `j <= i`, and
//!   its head output predicts the values of patch `i + 1`.
//! * [`Variant::EncoderMasked`]: full attention, and each patch reconstructs
//!   its own values.
//!
//! Prediction is one forward pass; the returned `h` values are the outputs
//! aligned with the placeholder region.

use ictp_autodiff::{gradcheck, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::IclSample;
use crate::error::{IctpError, Result};
use crate::task::{Token, WindowSpec};

/// Added to attention scores of future patches. `exp` of it underflows to 0.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DecoderCausal,
    EncoderMasked,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::DecoderCausal => "decoder-causal",
            Variant::EncoderMasked => "encoder-masked",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = IctpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "decoder-causal" | "decodercausal" | "decoder" => Ok(Variant::DecoderCausal),
            "encoder-masked" | "encodermasked" | "encoder" => Ok(Variant::EncoderMasked),
            _ => Err(IctpError::Config(format!("unknown model variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Longest token stream (including placeholders) the positional table covers.
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DecoderCausal,
            patch_size: 4,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 4,
            max_tokens: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IctpError::Config(m));
        if self.patch_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.ff_mult == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_tokens < self.patch_size {
            return bad("max_tokens is smaller than one patch".into());
        }
        Ok(())
    }

    /// Checks that demonstrations, the query and the placeholder region all
    /// start on patch boundaries for every demonstration count in `demo_counts`.
    pub fn check_geometry(&self, w: WindowSpec, demo_counts: &[usize]) -> Result<()> {
        let p = self.patch_size;
        let (l, h) = (w.lookback, w.horizon);
        if (l + h) % p != 0 {
            return Err(IctpError::Geometry(format!(
                "L + h = {} is not divisible by patch size {p}",
                l + h
            )));
        }
        for &m in demo_counts {
            let prefix = m * (l + h) + l;
            if prefix % p != 0 {
                return Err(IctpError::Geometry(format!(
                    "context length {prefix} (m = {m}) is not divisible by patch size {p}"
                )));
            }
            if prefix + h > self.max_tokens {
                return Err(IctpError::Geometry(format!(
                    "{} tokens exceed max_tokens {}",
                    prefix + h,
                    self.max_tokens
                )));
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Flattened patches: row `i` holds the `3p` features of steps `[ip, (i+1)p)`.
pub fn patchify(tokens: &[Token], p: usize) -> Result<Tensor> {
    if p == 0 || tokens.is_empty() || tokens.len() % p != 0 {
        return Err(IctpError::Geometry(format!(
            "{} tokens cannot be split into patches of {p}",
            tokens.len()
        )));
    }
    let data = tokens.iter().flat_map(|t| t.features()).collect();
    Ok(Tensor::matrix(tokens.len() / p, 3 * p, data)?)
}

/// `tokens ⊕ h` placeholder steps.
pub fn with_placeholders(tokens: &[Token], h: usize) -> Vec<Token> {
    let mut out = Vec::with_capacity(tokens.len() + h);
    out.extend_from_slice(tokens);
    out.extend(std::iter::repeat_n(Token::placeholder(), h));
    out
}

/// Sinusoidal position table, `[rows, d]`.
pub fn sinusoidal_table(rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::matrix(rows, d, data).expect("sized above")
}

#[derive(Debug, Clone)]
struct Head {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    out: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    heads: Vec<Head>,
    attn_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff_in: ParamId,
    ff_in_bias: ParamId,
    ff_out: ParamId,
    ff_out_bias: ParamId,
}

/// Parameter layout of a backbone; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    input: ParamId,
    input_bias: ParamId,
    blocks: Vec<Block>,
    final_gain: ParamId,
    final_bias: ParamId,
    head: ParamId,
    head_bias: ParamId,
    positions: Tensor,
}

fn shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (p, d, dh) = (c.patch_size, c.d_model, c.head_dim());
    let ff = d * c.ff_mult;
    let resid = 1.0 / ((2 * c.n_layers) as f64).sqrt();
    let mut v = vec![
        ("input.weight".to_string(), vec![3 * p, d], Init::Normal(1.0 / ((3 * p) as f64).sqrt())),
        ("input.bias".to_string(), vec![d], Init::Zero),
    ];
    for l in 0..c.n_layers {
        let pre = format!("block{l}");
        v.push((format!("{pre}.ln1.gain"), vec![d], Init::One));
        v.push((format!("{pre}.ln1.bias"), vec![d], Init::Zero));
        for hd in 0..c.n_heads {
            let sd = 1.0 / (d as f64).sqrt();
            v.push((format!("{pre}.head{hd}.query"), vec![d, dh], Init::Normal(sd)));
            v.push((format!("{pre}.head{hd}.key"), vec![d, dh], Init::Normal(sd)));
            v.push((format!("{pre}.head{hd}.value"), vec![d, dh], Init::Normal(sd)));
            v.push((
                format!("{pre}.head{hd}.out"),
                vec![dh, d],
                Init::Normal(resid / (d as f64).sqrt()),
            ));
        }
        v.push((format!("{pre}.attn.bias"), vec![d], Init::Zero));
        v.push((format!("{pre}.ln2.gain"), vec![d], Init::One));
        v.push((format!("{pre}.ln2.bias"), vec![d], Init::Zero));
        v.push((format!("{pre}.ff.in"), vec![d, ff], Init::Normal(1.0 / (d as f64).sqrt())));
        v.push((format!("{pre}.ff.in_bias"), vec![ff], Init::Zero));
        v.push((format!("{pre}.ff.out"), vec![ff, d], Init::Normal(resid / (ff as f64).sqrt())));
        v.push((format!("{pre}.ff.out_bias"), vec![d], Init::Zero));
    }
    v.push(("final.gain".to_string(), vec![d], Init::One));
    v.push(("final.bias".to_string(), vec![d], Init::Zero));
    v.push(("head.weight".to_string(), vec![d, p], Init::Normal(1.0 / (d as f64).sqrt())));
    v.push(("head.bias".to_string(), vec![p], Init::Zero));
    v
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    One,
    Normal(f64),
}

impl Model {
    /// Fresh parameters drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape, init) in shapes(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).expect("positive std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            store.add(name, Tensor::new(shape, data)?);
        }
        let model = Self::bind(config, &store)?;
        Ok((model, store))
    }

    /// Resolves parameter handles in an existing store, checking every shape.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in shapes(&config) {
            let id = store.id(&name)?;
            let got = store.get(id).tensor.shape();
            if got != shape.as_slice() {
                return Err(IctpError::Config(format!(
                    "parameter `{name}` has shape {got:?}, model expects {shape:?}"
                )));
            }
        }
        let expected = shapes(&config).len();
        if store.len() != expected {
            return Err(IctpError::Config(format!(
                "checkpoint holds {} parameters, model expects {expected}",
                store.len()
            )));
        }
        let id = |n: String| store.id(&n).expect("checked above");
        let blocks = (0..config.n_layers)
            .map(|l| {
                let pre = format!("block{l}");
                Block {
                    ln1_gain: id(format!("{pre}.ln1.gain")),
                    ln1_bias: id(format!("{pre}.ln1.bias")),
                    heads: (0..config.n_heads)
                        .map(|hd| Head {
                            query: id(format!("{pre}.head{hd}.query")),
                            key: id(format!("{pre}.head{hd}.key")),
                            value: id(format!("{pre}.head{hd}.value")),
                            out: id(format!("{pre}.head{hd}.out")),
                        })
                        .collect(),
                    attn_bias: id(format!("{pre}.attn.bias")),
                    ln2_gain: id(format!("{pre}.ln2.gain")),
                    ln2_bias: id(format!("{pre}.ln2.bias")),
                    ff_in: id(format!("{pre}.ff.in")),
                    ff_in_bias: id(format!("{pre}.ff.in_bias")),
                    ff_out: id(format!("{pre}.ff.out")),
                    ff_out_bias: id(format!("{pre}.ff.out_bias")),
                }
            })
            .collect();
        Ok(Self {
            config,
            input: id("input.weight".into()),
            input_bias: id("input.bias".into()),
            blocks,
            final_gain: id("final.gain".into()),
            final_bias: id("final.bias".into()),
            head: id("head.weight".into()),
            head_bias: id("head.bias".into()),
            positions: sinusoidal_table(config.max_tokens / config.patch_size, config.d_model),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Sets the output head to zero, so every prediction is exactly 0.
    pub fn zero_head(&self, store: &mut ParamStore) {
        for id in [self.head, self.head_bias] {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.config.max_tokens {
            return Err(IctpError::Geometry(format!(
                "{} tokens exceed max_tokens {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        Ok(())
    }

    /// Raw head outputs, `[patches, p]`. For the decoder row `i` predicts
    /// patch `i + 1`; for the encoder row `i` reconstructs patch `i`.
    pub fn forward_patches(&self, tape: &mut Tape<'_>, tokens: &[Token]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let patches = patchify(tokens, c.patch_size)?;
        let n = patches.shape()[0];
        let d = c.d_model;

        let x = tape.constant(patches);
        let w = tape.param(self.input);
        let b = tape.param(self.input_bias);
        let x = tape.matmul(x, w)?;
        let x = tape.add_bias(x, b)?;
        let pos = Tensor::matrix(n, d, self.positions.data()[..n * d].to_vec())?;
        let pos = tape.constant(pos);
        let mut x = tape.add(x, pos)?;

        let mask = match c.variant {
            Variant::DecoderCausal => {
                let mut m = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in i + 1..n {
                        m.data_mut()[i * n + j] = MASKED_SCORE;
                    }
                }
                Some(tape.constant(m))
            }
            Variant::EncoderMasked => None,
        };
        let scale = 1.0 / (c.head_dim() as f64).sqrt();

        for blk in &self.blocks {
            let a = self.norm(tape, x, blk.ln1_gain, blk.ln1_bias)?;
            let mut attn: Option<Var> = None;
            for hd in &blk.heads {
                let wq = tape.param(hd.query);
                let wk = tape.param(hd.key);
                let wv = tape.param(hd.value);
                let wo = tape.param(hd.out);
                let q = tape.matmul(a, wq)?;
                let k = tape.matmul(a, wk)?;
                let v = tape.matmul(a, wv)?;
                let kt = tape.transpose(k)?;
                let s = tape.matmul(q, kt)?;
                let mut s = tape.scale(s, scale)?;
                if let Some(m) = mask {
                    s = tape.add(s, m)?;
                }
                let s = tape.softmax(s)?;
                let z = tape.matmul(s, v)?;
                let o = tape.matmul(z, wo)?;
                attn = Some(match attn {
                    Some(acc) => tape.add(acc, o)?,
                    None => o,
                });
            }
            let ab = tape.param(blk.attn_bias);
            let attn = tape.add_bias(attn.expect("n_heads >= 1"), ab)?;
            x = tape.add(x, attn)?;

            let f = self.norm(tape, x, blk.ln2_gain, blk.ln2_bias)?;
            let w1 = tape.param(blk.ff_in);
            let b1 = tape.param(blk.ff_in_bias);
            let w2 = tape.param(blk.ff_out);
            let b2 = tape.param(blk.ff_out_bias);
            let f = tape.matmul(f, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            x = tape.add(x, f)?;
        }

        let x = self.norm(tape, x, self.final_gain, self.final_bias)?;
        let wh = tape.param(self.head);
        let bh = tape.param(self.head_bias);
        let y = tape.matmul(x, wh)?;
        Ok(tape.add_bias(y, bh)?)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let g = tape.param(gain);
        let b = tape.param(bias);
        let y = tape.layer_norm(x)?;
        let y = tape.mul_row(y, g)?;
        Ok(tape.add_bias(y, b)?)
    }

    /// Per-step predictions aligned with the input steps: row `i` of the
    /// result holds the model's values for patch `i + first`, where
    /// `first = 1` for the decoder and `0` for the encoder.
    fn aligned(&self, tape: &mut Tape<'_>, tokens: &[Token]) -> Result<(Var, usize)> {
        let out = self.forward_patches(tape, tokens)?;
        let n = tape.shape(out)[0];
        match self.config.variant {
            Variant::DecoderCausal => Ok((tape.slice_rows(out, 0, n - 1)?, 1)),
            Variant::EncoderMasked => Ok((out, 0)),
        }
    }

    fn check_horizon(&self, tokens: &[Token], h: usize) -> Result<()> {
        let p = self.config.patch_size;
        if h == 0 || h % p != 0 || tokens.len() % p != 0 {
            return Err(IctpError::Geometry(format!(
                "context of {} steps with horizon {h} does not align to patch size {p}",
                tokens.len()
            )));
        }
        if self.config.variant == Variant::DecoderCausal && tokens.is_empty() {
            return Err(IctpError::Geometry(
                "decoder needs at least one context patch".into(),
            ));
        }
        Ok(())
    }

    /// The `h` predicted values following `tokens`.
    pub fn predict_tokens(&self, params: &ParamStore, tokens: &[Token], h: usize) -> Result<Vec<f64>> {
        self.check_horizon(tokens, h)?;
        let full = with_placeholders(tokens, h);
        let mut tape = Tape::new(params);
        let (pred, first) = self.aligned(&mut tape, &full)?;
        let p = self.config.patch_size;
        let start = tokens.len() - first * p;
        Ok(tape.value(pred).data()[start..start + h].to_vec())
    }

    pub fn predict(&self, params: &ParamStore, sample: &IclSample) -> Result<Vec<f64>> {
        self.predict_tokens(params, &sample.tokens, sample.target.len())
    }

    /// Masked MSE of one sample, recorded on `tape`.
    ///
    /// Only the query target contributes unless `supervise_demo_outputs` is
    /// set, in which case demonstration answer steps are scored as well.
    pub fn loss(&self, tape: &mut Tape<'_>, sample: &IclSample, supervise_demo_outputs: bool) -> Result<Var> {
        let (target, mask) = self.loss_targets(sample, supervise_demo_outputs)?;
        let full = with_placeholders(&sample.tokens, sample.target.len());
        let (pred, _) = self.aligned(tape, &full)?;
        Ok(tape.mse_loss(pred, &target, &mask)?)
    }

    /// Analytic gradients of [`Model::loss`] against central differences with
    /// step `eps`, over every parameter element. Gradients smaller than
    /// `min_magnitude` on both sides are not counted towards the relative error.
    pub fn check_gradients(
        &self,
        store: &mut ParamStore,
        sample: &IclSample,
        eps: f64,
        min_magnitude: f64,
    ) -> Result<gradcheck::GradCheckReport> {
        let grads = {
            let mut tape = Tape::new(store);
            let l = self.loss(&mut tape, sample, false)?;
            tape.backward(l)?
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let mut report: Option<gradcheck::GradCheckReport> = None;
        for id in ids {
            let analytic = match grads.get(id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; store.get(id).tensor.data().len()],
            };
            let mut failure = None;
            let numeric = gradcheck::numeric_grad(store, id, eps, |p| {
                let mut t = Tape::new(p);
                match self.loss(&mut t, sample, false) {
                    Ok(l) => t.value(l).data()[0],
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let r = gradcheck::compare(&analytic, &numeric, min_magnitude);
            report = Some(match report {
                Some(acc) => acc.merge(r),
                None => r,
            });
        }
        report.ok_or_else(|| IctpError::Config("model has no parameters".into()))
    }

    /// Target values and element mask aligned with the model's predictions.
    pub fn loss_targets(&self, sample: &IclSample, supervise_demo_outputs: bool) -> Result<(Tensor, Tensor)> {
        let h = sample.target.len();
        self.check_horizon(&sample.tokens, h)?;
        let p = self.config.patch_size;
        let first = match self.config.variant {
            Variant::DecoderCausal => 1,
            Variant::EncoderMasked => 0,
        };
        let total = sample.tokens.len() + h;
        let skip = first * p;
        let mut values = vec![0.0; total - skip];
        let mut mask = vec![0.0; total - skip];
        if supervise_demo_outputs {
            for (i, t) in sample.tokens.iter().enumerate().skip(skip) {
                if t.answer {
                    values[i - skip] = t.value;
                    mask[i - skip] = 1.0;
                }
            }
        }
        let q = sample.tokens.len() - skip;
        values[q..].copy_from_slice(&sample.target);
        mask[q..].fill(1.0);
        let rows = (total - skip) / p;
        Ok((Tensor::matrix(rows, p, values)?, Tensor::matrix(rows, p, mask)?))
    }
}
