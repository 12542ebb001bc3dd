//! File-backed pipeline stages: synth, ingest, build, train, eval, report.
//!
//! Every stage reads its inputs from and writes its outputs under
//! `RunConfig::output_dir`:
//!
//! ```text
//! data/synth.csv, data/synth.json     synth
//! store.json                          ingest
//! seed-<s>/train.jsonl, valid.jsonl   build
//! seed-<s>/checkpoint.json            train
//! seed-<s>/train_record.csv           train
//! seed-<s>/eval.csv                   eval
//! report.csv, report.md               report
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ictp_autodiff::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::context::{build_mixed_dataset, BuildSpec, BuildStats, IctpDataset};
use crate::error::{IctpError, Result};
use crate::eval::{improvement_ratio_over, run_unseen_eval, EvalProtocol, EvalReport, Method, Metric, TrainedRun};
use crate::model::{Model, ModelConfig};
use crate::series::{load_csv, write_csv, ColumnSpec, RawDataset, SeriesStore, Split};
use crate::synth::generate_dataset;
use crate::task::TaskKind;
use crate::train::{train_with, EpochRecord, TrainRecord};

pub const SYNTH_NAME: &str = "synth";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| IctpError::io(dir.display().to_string(), e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let f = fs::File::create(path).map_err(|e| IctpError::io(path.display().to_string(), e))?;
    Ok(BufWriter::new(f))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(IctpError::MissingInput(format!("missing {what}: {}", path.display())))
    }
}

pub fn synth_csv_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("data").join(format!("{SYNTH_NAME}.csv"))
}

pub fn store_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("store.json")
}

pub fn train_set_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.seed_dir(seed).join("train.jsonl")
}

pub fn valid_set_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.seed_dir(seed).join("valid.jsonl")
}

pub fn checkpoint_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.seed_dir(seed).join("checkpoint.json")
}

pub fn eval_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.seed_dir(seed).join("eval.csv")
}

/// Writes the synthetic series as CSV plus a JSON sidecar with the config.
pub fn synth_stage(cfg: &RunConfig) -> Result<PathBuf> {
    let d = generate_dataset(&cfg.synth, SYNTH_NAME)?;
    let path = synth_csv_path(cfg);
    create_dir(path.parent().expect("has parent"))?;
    write_csv(&path, &d)?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::json!({ "config": cfg.to_json(), "seed": cfg.synth.seed });
    let mut w = create_file(&sidecar)?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.flush().map_err(|e| IctpError::io(sidecar.display().to_string(), e))?;
    Ok(path)
}

/// The configured CSV files, or the synth stage's output when none are listed.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<RawDataset>> {
    let spec = ColumnSpec {
        name: None,
        channels: cfg.data.channels.clone(),
    };
    if cfg.data.csv.is_empty() {
        let path = synth_csv_path(cfg);
        require(&path, "synthetic data (run `synth` first)")?;
        return Ok(vec![load_csv(&path, &spec)?]);
    }
    cfg.data.csv.iter().map(|p| load_csv(p, &spec)).collect()
}

pub fn ingest_stage(cfg: &RunConfig) -> Result<SeriesStore> {
    let datasets = load_datasets(cfg)?;
    let store = SeriesStore::from_datasets(&datasets, cfg.to_json())?;
    create_dir(&cfg.output_dir)?;
    store.save(&store_path(cfg))?;
    Ok(store)
}

pub fn load_store(cfg: &RunConfig) -> Result<SeriesStore> {
    let path = store_path(cfg);
    require(&path, "series store (run `ingest` first)")?;
    SeriesStore::load(&path)
}

/// Train and validation sets: queries from the train and valid splits,
/// demonstrations from the train split in both cases.
pub fn build_datasets(
    store: &SeriesStore,
    spec: &BuildSpec,
    valid_stride: usize,
) -> Result<(IctpDataset, IctpDataset, BuildStats)> {
    let train = store.split(Split::Train);
    let valid = store.split(Split::Valid);
    let (tr, stats) = build_mixed_dataset(&train, &train, spec)?;
    let vspec = BuildSpec {
        stride: valid_stride,
        seed: spec.seed.wrapping_add(1 << 32),
        ..spec.clone()
    };
    let (va, _) = build_mixed_dataset(&valid, &train, &vspec)?;
    Ok((tr, va, stats))
}

pub fn build_stage(cfg: &RunConfig, store: &SeriesStore, seed: u64) -> Result<BuildStats> {
    let spec = cfg.build_spec(seed)?;
    let (mut tr, mut va, stats) = build_datasets(store, &spec, cfg.build.valid_stride)?;
    tr.header.config = cfg.to_json();
    va.header.config = cfg.to_json();
    for (d, path) in [(&tr, train_set_path(cfg, seed)), (&va, valid_set_path(cfg, seed))] {
        let w = create_file(&path)?;
        d.write_jsonl(w)?;
    }
    Ok(stats)
}

/// Seeded initial parameters for `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Model::init(config, &mut rng)
}

/// Metadata stored next to the parameters in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub trained_tasks: Vec<TaskKind>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub config: serde_json::Value,
}

/// Trains from a fresh initialization on in-memory datasets.
pub fn train_model(
    cfg: &RunConfig,
    train: &IctpDataset,
    valid: &IctpDataset,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, ParamStore, TrainRecord)> {
    let (model, mut params) = init_model(cfg.model, seed)?;
    let record = train_with(&model, &mut params, train, valid, &cfg.train_config(seed), on_epoch)?;
    Ok((model, params, record))
}

pub fn train_stage(cfg: &RunConfig, seed: u64, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainRecord> {
    let (tp, vp) = (train_set_path(cfg, seed), valid_set_path(cfg, seed));
    require(&tp, "training set (run `build` first)")?;
    require(&vp, "validation set (run `build` first)")?;
    let train = IctpDataset::load(&tp)?;
    let valid = IctpDataset::load(&vp)?;
    let (_, params, record) = train_model(cfg, &train, &valid, seed, on_epoch)?;

    let meta = CheckpointMeta {
        model: cfg.model,
        seed,
        trained_tasks: train.header.tasks.clone(),
        best_epoch: record.best_epoch,
        best_valid_loss: record.best_valid_loss,
        config: cfg.to_json(),
    };
    params.save(&checkpoint_path(cfg, seed), serde_json::to_value(&meta)?)?;
    let rec_path = cfg.seed_dir(seed).join("train_record.csv");
    let mut w = create_file(&rec_path)?;
    writeln!(w, "# seed,{seed}").map_err(|e| IctpError::io("train record", e))?;
    writeln!(w, "# config,{}", serde_json::to_string(&cfg.to_json())?).map_err(|e| IctpError::io("train record", e))?;
    record.write_csv(w)?;
    Ok(record)
}

pub fn load_checkpoint(cfg: &RunConfig, seed: u64) -> Result<(Model, ParamStore, CheckpointMeta)> {
    let path = checkpoint_path(cfg, seed);
    require(&path, "checkpoint (run `train` first)")?;
    let (params, meta) = ParamStore::load(&path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if meta.model != cfg.model {
        return Err(IctpError::Config(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    let model = Model::bind(meta.model, &params)?;
    Ok((model, params, meta))
}

pub fn eval_stage(cfg: &RunConfig, store: &SeriesStore, seed: u64) -> Result<EvalReport> {
    let (model, params, meta) = load_checkpoint(cfg, seed)?;
    let protocol = cfg.protocol()?;
    let run = TrainedRun {
        seed,
        model: &model,
        params: &params,
        trained_tasks: &meta.trained_tasks,
    };
    let report = run_unseen_eval(&protocol, &[run], store)?;
    let path = eval_path(cfg, seed);
    let mut w = create_file(&path)?;
    writeln!(w, "# seed,{seed}").map_err(|e| IctpError::io("eval report", e))?;
    writeln!(w, "# config,{}", serde_json::to_string(&cfg.to_json())?).map_err(|e| IctpError::io("eval report", e))?;
    report.write_csv(&mut w)?;
    w.flush().map_err(|e| IctpError::io("eval report", e))?;
    Ok(report)
}

/// Merges every seed's evaluation into `report.csv` and a Markdown table in
/// `report.md`. Returns the Markdown.
pub fn report_stage(cfg: &RunConfig) -> Result<String> {
    let mut all = EvalReport::default();
    for &seed in &cfg.seeds {
        let path = eval_path(cfg, seed);
        require(&path, "evaluation report (run `eval` first)")?;
        let f = fs::File::open(&path).map_err(|e| IctpError::io(path.display().to_string(), e))?;
        all.rows.extend(EvalReport::read_csv(BufReader::new(f))?.rows);
    }
    let mut w = create_file(&cfg.output_dir.join("report.csv"))?;
    writeln!(w, "# config,{}", serde_json::to_string(&cfg.to_json())?).map_err(|e| IctpError::io("report", e))?;
    all.write_csv(&mut w)?;
    w.flush().map_err(|e| IctpError::io("report", e))?;

    let md = render_markdown(&all, cfg);
    let mut w = create_file(&cfg.output_dir.join("report.md"))?;
    w.write_all(md.as_bytes()).map_err(|e| IctpError::io("report", e))?;
    w.flush().map_err(|e| IctpError::io("report", e))?;
    Ok(md)
}

fn ratio_text(rows: &[crate::eval::EvalRow], metrics: &[Metric]) -> String {
    match improvement_ratio_over(rows, metrics) {
        Ok(v) => format!("{:.1}%", 100.0 * v),
        Err(e) => format!("n/a ({e})"),
    }
}

/// Seed-averaged table with baseline and in-context columns side by side.
pub fn render_markdown(report: &EvalReport, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Unseen-task evaluation\n\nseeds: {:?}, demonstrations at evaluation: {}\n",
        cfg.seeds, cfg.eval.demo_count
    );
    let _ = writeln!(
        s,
        "| backbone | task | dataset | h | baseline MSE | baseline MAE | ICTP MSE | ICTP MAE | seeds |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for r in report.table() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            r.variant, r.task, r.dataset, r.horizon, r.baseline_mse, r.baseline_mae, r.ictp_mse, r.ictp_mae, r.seeds
        );
    }
    let _ = writeln!(s, "\nImprovement of ICTP over the baseline, mean over cells:\n");
    let _ = writeln!(s, "- MSE and MAE: {}", ratio_text(&report.rows, &[Metric::Mse, Metric::Mae]));
    let _ = writeln!(s, "- MSE: {}", ratio_text(&report.rows, &[Metric::Mse]));
    let _ = writeln!(s, "- MAE: {}", ratio_text(&report.rows, &[Metric::Mae]));
    s
}

/// Per-seed outcome of [`unseen_task_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub train_secs: f64,
    /// Baseline and in-context rows at the configured demonstration count.
    pub report: EvalReport,
    /// In-context MSE with no demonstrations.
    pub zero_shot_mse: f64,
    /// In-context MSE with demonstrations of `wrong_task` instead of the evaluation task.
    pub wrong_context_mse: f64,
    pub wrong_task: TaskKind,
    pub checksum_stable: bool,
}

impl SeedOutcome {
    pub fn mse(&self, method: Method) -> f64 {
        self.report
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.mse)
            .sum::<f64>()
            / self.report.rows.iter().filter(|r| r.method == method).count().max(1) as f64
    }
}

/// Builds, trains and evaluates one model per seed entirely in memory.
/// Besides the main protocol each model is also scored with zero
/// demonstrations and with demonstrations of the first pre-training task.
pub fn unseen_task_experiment(
    cfg: &RunConfig,
    store: &SeriesStore,
    mut on_epoch: impl FnMut(u64, &EpochRecord),
) -> Result<Vec<SeedOutcome>> {
    let protocol = cfg.protocol()?;
    let wrong_task = cfg.tasks.pretrain[0];
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let spec = cfg.build_spec(seed)?;
        let (train, valid, _) = build_datasets(store, &spec, cfg.build.valid_stride)?;
        let (model, params, record) = train_model(cfg, &train, &valid, seed, |e| on_epoch(seed, e))?;
        let before = params.checksum();
        let run = || TrainedRun {
            seed,
            model: &model,
            params: &params,
            trained_tasks: &spec.tasks,
        };
        let report = run_unseen_eval(&protocol, &[run()], store)?;
        let ictp_mse = |r: &EvalReport| {
            let v: Vec<f64> = r.rows.iter().filter(|x| x.method == Method::Ictp).map(|x| x.mse).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let zero = EvalProtocol { demo_count: 0, ..protocol.clone() };
        let zero_shot_mse = ictp_mse(&run_unseen_eval(&zero, &[run()], store)?);
        let wrong = EvalProtocol {
            context_task: Some(wrong_task),
            ..protocol.clone()
        };
        let wrong_context_mse = ictp_mse(&run_unseen_eval(&wrong, &[run()], store)?);
        out.push(SeedOutcome {
            seed,
            best_epoch: record.best_epoch,
            train_secs: record.wall_time_secs,
            report,
            zero_shot_mse,
            wrong_context_mse,
            wrong_task,
            checksum_stable: params.checksum() == before,
        });
    }
    Ok(out)
}

/// All seeds' rows in one report.
pub fn merge_reports(outcomes: &[SeedOutcome]) -> EvalReport {
    EvalReport {
        rows: outcomes.iter().flat_map(|o| o.report.rows.clone()).collect(),
    }
}
