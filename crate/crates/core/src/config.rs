//! Run configuration: one TOML file describing data, window, tasks, model,
//! training and evaluation. Unknown keys are rejected.
//!
//! ```toml
//! output_dir = "runs/demo"
//! seeds = [0, 1, 2]
//!
//! [synth]
//! count = 32
//!
//! [tasks]
//! pretrain = ["forecast", "impute"]
//! eval = "backtrace"
//!
//! [model]
//! variant = "decoder-causal"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::{BuildSpec, DemoOptions};
use crate::error::{IctpError, Result};
use crate::eval::EvalProtocol;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::task::{TaskKind, WindowSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV files to ingest. When empty, the synthetic series are used.
    pub csv: Vec<PathBuf>,
    /// Channel subset applied to every CSV; all channels when empty.
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub horizon: usize,
    /// Defaults to `2 * horizon`.
    pub lookback: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            lookback: None,
        }
    }
}

impl WindowConfig {
    pub fn spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.lookback.unwrap_or(2 * self.horizon), self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub pretrain: Vec<TaskKind>,
    pub eval: TaskKind,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            pretrain: vec![TaskKind::Forecast, TaskKind::Impute],
            eval: TaskKind::Backtrace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    /// One build per count, concatenated.
    pub demo_counts: Vec<usize>,
    /// Step between query windows of the training set.
    pub stride: usize,
    /// Step between query windows of the validation set.
    pub valid_stride: usize,
    pub pairwise_disjoint_demos: bool,
    pub cross_channel_demos: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            demo_counts: vec![0, 2, 4],
            stride: 24,
            valid_stride: 48,
            pairwise_disjoint_demos: false,
            cross_channel_demos: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub demo_count: usize,
    pub stride: usize,
    /// Restrict scoring to these datasets; all when empty.
    pub datasets: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            demo_count: 4,
            stride: 12,
            datasets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub window: WindowConfig,
    pub tasks: TaskConfig,
    pub build: BuildConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            window: WindowConfig::default(),
            tasks: TaskConfig::default(),
            build: BuildConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Values given on the command line; each one that is set wins over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub demo_count: Option<usize>,
    pub max_epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IctpError::Config(e.message().to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| IctpError::MissingInput(format!("{}: missing config file", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// flag > config file > default.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(o) = &overrides.output_dir {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = &overrides.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = overrides.demo_count {
            cfg.eval.demo_count = m;
        }
        if let Some(e) = overrides.max_epochs {
            cfg.train.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.window.spec()?;
        if self.seeds.is_empty() {
            return Err(IctpError::Config("at least one seed is required".into()));
        }
        if self.tasks.pretrain.is_empty() {
            return Err(IctpError::Config("tasks.pretrain is empty".into()));
        }
        if self.tasks.pretrain.contains(&self.tasks.eval) {
            return Err(IctpError::Config(format!(
                "evaluation task `{}` must not be a pre-training task",
                self.tasks.eval
            )));
        }
        if self.build.demo_counts.is_empty() || self.build.stride == 0 || self.build.valid_stride == 0 {
            return Err(IctpError::Config(
                "build needs demo_counts and positive strides".into(),
            ));
        }
        if self.eval.stride == 0 {
            return Err(IctpError::Config("eval.stride must be positive".into()));
        }
        if self.data.csv.is_empty() {
            self.synth.validate().map_err(|e| IctpError::Config(e.to_string()))?;
        }
        self.model.validate()?;
        let mut counts = self.build.demo_counts.clone();
        counts.push(self.eval.demo_count);
        self.model
            .check_geometry(w, &counts)
            .map_err(|e| IctpError::Config(e.to_string()))?;
        self.train.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }

    pub fn build_spec(&self, seed: u64) -> Result<BuildSpec> {
        Ok(BuildSpec {
            tasks: self.tasks.pretrain.clone(),
            window: self.window.spec()?,
            demo_counts: self.build.demo_counts.clone(),
            stride: self.build.stride,
            seed,
            options: DemoOptions {
                pairwise_disjoint_demos: self.build.pairwise_disjoint_demos,
                cross_channel_demos: self.build.cross_channel_demos,
            },
        })
    }

    pub fn protocol(&self) -> Result<EvalProtocol> {
        let w = self.window.spec()?;
        Ok(EvalProtocol {
            demo_count: self.eval.demo_count,
            stride: self.eval.stride,
            datasets: self.eval.datasets.clone(),
            ..EvalProtocol::new(self.tasks.eval, self.tasks.pretrain.clone(), w)
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.window.spec().unwrap(), WindowSpec::new(24, 12).unwrap());
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.synth.count, 32);
    }

    #[test]
    fn parses_partial_file() {
        let c = RunConfig::from_toml(
            r#"
            output_dir = "out"
            seeds = [7]
            [tasks]
            pretrain = ["forecast", "backtrace"]
            eval = "impute"
            [model]
            variant = "encoder-masked"
            d_model = 32
            [train]
            learning_rate = 0.01
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.model.variant, Variant::EncoderMasked);
        assert_eq!(c.model.n_heads, 4);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[model]\nwidth = 3", "[train]\nlr = 0.1"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn seen_eval_task_is_rejected() {
        let c = RunConfig {
            tasks: TaskConfig {
                pretrain: vec![TaskKind::Forecast, TaskKind::Backtrace],
                eval: TaskKind::Backtrace,
            },
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(IctpError::Config(_))));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seeds = [3]\n[eval]\ndemo_count = 2\n").unwrap();
        let from_file = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(from_file.seeds, vec![3]);
        assert_eq!(from_file.eval.demo_count, 2);
        assert_eq!(from_file.eval.stride, 12);
        let flagged = RunConfig::resolve(
            Some(&path),
            &Overrides {
                seeds: Some(vec![9]),
                demo_count: Some(0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(flagged.seeds, vec![9]);
        assert_eq!(flagged.eval.demo_count, 0);
    }

    #[test]
    fn missing_config_file_is_missing_input() {
        let e = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn json_echo_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
