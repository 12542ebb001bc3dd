//! Mini-batch Adam with global-norm clipping and early stopping on
//! validation loss.

use std::io::Write;
use std::time::Instant;

use ictp_autodiff::{AutodiffError, Gradients, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{IclSample, IctpDataset};
use crate::error::{IctpError, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Also score demonstration answer steps, not just the query target.
    pub supervise_demo_outputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            supervise_demo_outputs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IctpError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("eps and clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub wall_time_secs: f64,
}

impl TrainRecord {
    /// `epoch,train_loss,valid_loss` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "valid_loss"])?;
        for e in &self.epochs {
            out.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.valid_loss.to_string()])?;
        }
        out.flush().map_err(|e| IctpError::io("train record", e))
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update from the gradients stored in each parameter's `grad`.
    pub fn step(&mut self, params: &mut ParamStore, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let x = p.tensor.data_mut();
            for j in 0..x.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                x[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

/// Scales every stored gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

fn numerical(epoch: usize, e: IctpError) -> IctpError {
    match e {
        IctpError::Autodiff(AutodiffError::NonFinite { op }) => {
            IctpError::Numerical(format!("epoch {epoch}: non-finite value in {op}"))
        }
        other => other,
    }
}

/// Loss and gradients of each sample, in input order.
fn sample_grads(
    model: &Model,
    params: &ParamStore,
    samples: &[&IclSample],
    supervise: bool,
) -> Result<Vec<(f64, Gradients)>> {
    samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new(params);
            let l = model.loss(&mut tape, s, supervise)?;
            let v = tape.value(l).data()[0];
            Ok((v, tape.backward(l)?))
        })
        .collect()
}

/// Mean per-sample loss; summation in dataset order.
pub fn mean_loss(model: &Model, params: &ParamStore, data: &IctpDataset, supervise: bool) -> Result<f64> {
    let losses: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new(params);
            let l = model.loss(&mut tape, s, supervise)?;
            Ok(tape.value(l).data()[0])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_dataset(model: &Model, d: &IctpDataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(IctpError::EmptyDataset(format!("{what} dataset has no samples")));
    }
    model
        .config()
        .check_geometry(d.header.window, &d.header.demo_counts)
}

pub fn train(
    model: &Model,
    params: &mut ParamStore,
    train: &IctpDataset,
    valid: &IctpDataset,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    train_with(model, params, train, valid, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &Model,
    params: &mut ParamStore,
    train: &IctpDataset,
    valid: &IctpDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRecord> {
    cfg.validate()?;
    check_dataset(model, train, "train")?;
    check_dataset(model, valid, "valid")?;
    if train.header.window != valid.header.window {
        return Err(IctpError::Geometry("train and valid windows differ".into()));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (0usize, f64::INFINITY, params.clone());
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&IclSample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let results = sample_grads(model, params, &samples, cfg.supervise_demo_outputs)
                .map_err(|e| numerical(epoch, e))?;
            params.zero_grad();
            let mut acc: Option<Gradients> = None;
            for (loss, g) in results {
                if !loss.is_finite() {
                    return Err(IctpError::Numerical(format!("epoch {epoch}: training loss is {loss}")));
                }
                total += loss;
                match acc.as_mut() {
                    Some(a) => a.merge(&g),
                    None => acc = Some(g),
                }
            }
            params.accumulate(&acc.expect("non-empty batch"));
            let inv = 1.0 / batch.len() as f64;
            for p in params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= inv);
            }
            clip_grad_norm(params, cfg.clip_norm);
            adam.step(params, cfg);
        }
        let train_loss = total / train.len() as f64;
        let valid_loss =
            mean_loss(model, params, valid, cfg.supervise_demo_outputs).map_err(|e| numerical(epoch, e))?;
        if !valid_loss.is_finite() {
            return Err(IctpError::Numerical(format!("epoch {epoch}: validation loss is {valid_loss}")));
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        };
        on_epoch(&rec);
        epochs.push(rec);
        if valid_loss < best.1 {
            best = (epoch, valid_loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    params.copy_values_from(&best.2)?;
    params.zero_grad();
    Ok(TrainRecord {
        epochs,
        best_epoch: best.0,
        best_valid_loss: best.1,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{build_ictp_dataset, DemoOptions};
    use crate::model::{ModelConfig, Variant};
    use crate::series::{ChannelSeries, Split};
    use crate::task::{TaskKind, WindowSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            variant: Variant::DecoderCausal,
            patch_size: 2,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
            max_tokens: 64,
        }
    }

    fn data(n: usize, seed: u64, f: impl Fn(usize) -> f64) -> IctpDataset {
        let s = ChannelSeries {
            dataset: "d".into(),
            channel: "c".into(),
            split: Split::Train,
            values: (0..n).map(f).collect(),
            origin_offset: 0,
        };
        let w = WindowSpec::new(4, 2).unwrap();
        build_ictp_dataset(&[s], &[TaskKind::Forecast], w, 1, 2, seed, DemoOptions::default())
            .unwrap()
            .0
    }

    fn fresh(seed: u64) -> (Model, ParamStore) {
        Model::init(tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = data(40, 1, |i| (i as f64 * 0.4).sin());
        let (m, mut p) = fresh(0);
        let before = p.checksum();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            patience: 3,
            batch_size: 4,
            ..Default::default()
        };
        train(&m, &mut p, &d, &d, &cfg).unwrap();
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn overfits_a_single_sample() {
        let mut d = data(40, 2, |i| (i as f64 * 0.4).sin());
        d.samples.truncate(1);
        let (m, mut p) = fresh(1);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 200,
            patience: 200,
            ..Default::default()
        };
        let rec = train(&m, &mut p, &d, &d, &cfg).unwrap();
        let first = rec.epochs[0].train_loss;
        let last = rec.epochs.last().unwrap().train_loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
        let early: f64 = rec.epochs[..20].iter().map(|e| e.train_loss).sum();
        let late: f64 = rec.epochs[180..].iter().map(|e| e.train_loss).sum();
        assert!(late < early);
    }

    #[test]
    fn same_seed_same_run() {
        let d = data(60, 3, |i| (i as f64 * 0.3).cos());
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 4,
            batch_size: 5,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let (m, mut p) = fresh(2);
            let r = train(&m, &mut p, &d, &d, &cfg).unwrap();
            (r.epochs, r.best_epoch, p.checksum())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn restores_best_validation_parameters() {
        let tr = data(60, 4, |i| (i as f64 * 0.3).sin());
        let va = data(60, 5, |i| (i as f64 * 0.7).cos() * 3.0);
        let cfg = TrainConfig {
            learning_rate: 3e-2,
            max_epochs: 30,
            patience: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (m, mut p) = fresh(3);
        let rec = train(&m, &mut p, &tr, &va, &cfg).unwrap();
        let min = rec.epochs.iter().map(|e| e.valid_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(rec.best_valid_loss, min);
        assert_eq!(rec.epochs[rec.best_epoch - 1].valid_loss, min);
        assert_eq!(mean_loss(&m, &p, &va, false).unwrap(), min);
        let stopped_early = rec.epochs.len() < cfg.max_epochs;
        if stopped_early {
            assert_eq!(rec.epochs.len(), rec.best_epoch + cfg.patience);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (_, mut p) = fresh(4);
        for q in p.iter_mut() {
            q.grad.data_mut().fill(3.0);
        }
        let before = clip_grad_norm(&mut p, 1.0);
        assert!(before > 1.0);
        let after: f64 = p.iter().flat_map(|q| q.grad.data().iter()).map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn record_csv_layout() {
        let rec = TrainRecord {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                valid_loss: 0.25,
            }],
            best_epoch: 1,
            best_valid_loss: 0.25,
            wall_time_secs: 0.0,
        };
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,valid_loss\n1,0.5,0.25\n");
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let d = data(40, 6, |i| i as f64 * 1e200);
        let (m, mut p) = fresh(5);
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 2,
            ..Default::default()
        };
        let err = train(&m, &mut p, &d, &d, &cfg).unwrap_err();
        assert!(matches!(&err, IctpError::Numerical(msg) if msg.starts_with("epoch 1")), "{err}");
        assert_eq!(err.exit_code(), 4);
    }
}
