//! Seeded synthetic series: sinusoid mixtures with AR(1) noise, and AR(2)
//! processes.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::context::window_rng;
use crate::error::{IctpError, Result};
use crate::series::{NamedChannel, RawDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthFamily {
    SinusoidMixture,
    Ar2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub family: SynthFamily,
    pub count: usize,
    pub length: usize,
    pub seed: u64,
    /// Horizon the series are meant for; `length` must cover ten `L + h` windows.
    pub horizon: usize,
    /// Inclusive range of sinusoid counts per series.
    pub components: (usize, usize),
    pub amplitude: (f64, f64),
    /// Angular frequency range, radians per step.
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    /// Noise standard deviation (AR(1) innovations, or AR(2) innovations).
    pub noise_sigma: f64,
    /// Lag-one coefficient of the sinusoid family's noise.
    pub noise_ar: f64,
    /// Fixed AR(2) coefficients; drawn per series from the stationary triangle when absent.
    pub ar_coefficients: Option<(f64, f64)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            family: SynthFamily::SinusoidMixture,
            count: 32,
            length: 2048,
            seed: 0,
            horizon: 12,
            components: (2, 3),
            amplitude: (0.5, 1.5),
            frequency: (2.0 * PI / 64.0, 2.0 * PI / 16.0),
            phase: (0.0, 2.0 * PI),
            noise_sigma: 0.05,
            noise_ar: 0.5,
            ar_coefficients: None,
        }
    }
}

/// `|phi2| < 1`, `phi1 + phi2 < 1`, `phi2 - phi1 < 1`.
pub fn is_stationary(phi1: f64, phi2: f64) -> bool {
    phi2.abs() < 1.0 && phi1 + phi2 < 1.0 && phi2 - phi1 < 1.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IctpError::Synth(m));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        let need = 10 * 3 * self.horizon;
        if self.length < need {
            return bad(format!(
                "length {} is shorter than ten windows of L + h = {}",
                self.length,
                3 * self.horizon
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.components.0 == 0 || self.components.0 > self.components.1 {
            return bad(format!("invalid component range {:?}", self.components));
        }
        if !ordered(self.amplitude) || !ordered(self.frequency) || !ordered(self.phase) {
            return bad("amplitude, frequency and phase ranges must be finite and ordered".into());
        }
        if !(self.noise_ar.abs() < 1.0) {
            return bad("noise_ar must lie in (-1, 1)".into());
        }
        if let Some((a, b)) = self.ar_coefficients {
            if !is_stationary(a, b) {
                return bad(format!("AR(2) coefficients ({a}, {b}) are not stationary"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * t + self.phase).sin()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn draw_sinusoids<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<Sinusoid> {
    let n = rng.random_range(spec.components.0..=spec.components.1);
    (0..n)
        .map(|_| Sinusoid {
            amplitude: uniform(rng, spec.amplitude),
            frequency: uniform(rng, spec.frequency),
            phase: uniform(rng, spec.phase),
        })
        .collect()
}

/// Uniform over the stationary triangle, by rejection.
fn draw_ar2<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    loop {
        let a = rng.random_range(-2.0..2.0);
        let b = rng.random_range(-1.0..1.0);
        if is_stationary(a, b) {
            return (a, b);
        }
    }
}

const AR2_BURN_IN: usize = 200;

/// One series per `count`, each from its own stream of `seed`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = window_rng(spec.seed, i as u64);
            match spec.family {
                SynthFamily::SinusoidMixture => {
                    let waves = draw_sinusoids(spec, &mut rng);
                    let mut e = 0.0;
                    (0..spec.length)
                        .map(|t| {
                            let xi: f64 = StandardNormal.sample(&mut rng);
                            e = spec.noise_ar * e + spec.noise_sigma * xi;
                            waves.iter().map(|w| w.at(t as f64)).sum::<f64>() + e
                        })
                        .collect()
                }
                SynthFamily::Ar2 => {
                    let (a, b) = spec.ar_coefficients.unwrap_or_else(|| draw_ar2(&mut rng));
                    let (mut x1, mut x2) = (0.0, 0.0);
                    let mut out = Vec::with_capacity(spec.length);
                    for t in 0..AR2_BURN_IN + spec.length {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        let x = a * x1 + b * x2 + spec.noise_sigma * xi;
                        x2 = x1;
                        x1 = x;
                        if t >= AR2_BURN_IN {
                            out.push(x);
                        }
                    }
                    out
                }
            }
        })
        .collect())
}

/// The generated series as one dataset with columns `series_000`, `series_001`, ...
/// and integer timestamps `0..length`.
pub fn generate_dataset(spec: &SynthSpec, name: &str) -> Result<RawDataset> {
    let series = generate(spec)?;
    Ok(RawDataset {
        name: name.to_string(),
        timestamps: (0..spec.length as i64).collect(),
        channels: series
            .into_iter()
            .enumerate()
            .map(|(i, values)| NamedChannel {
                name: format!("series_{i:03}"),
                values,
            })
            .collect(),
    })
}
