//! Unseen-task evaluation: score a frozen backbone on a task it never
//! trained on, once with in-context demonstrations and once through the
//! matching baseline adapter.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ictp_autodiff::ParamStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{adapter_for, apply};
use crate::context::{concat_examples, recent_demos, window_rng};
use crate::error::{IctpError, Result};
use crate::model::Model;
use crate::series::{SeriesStore, Split};
use crate::task::{generate, TaskKind, WindowSpec};

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(IctpError::Geometry(format!(
            "prediction has {} values, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(IctpError::Geometry("cannot score an empty prediction".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub eval_task: TaskKind,
    pub pretrain_tasks: Vec<TaskKind>,
    pub demo_count: usize,
    pub window: WindowSpec,
    /// Datasets to score; all when empty.
    #[serde(default)]
    pub datasets: Vec<String>,
    /// Step between consecutive test query windows.
    pub stride: usize,
    /// Task of the demonstrations, when deliberately different from `eval_task`.
    #[serde(default)]
    pub context_task: Option<TaskKind>,
}

impl EvalProtocol {
    pub fn new(eval_task: TaskKind, pretrain_tasks: Vec<TaskKind>, window: WindowSpec) -> Self {
        Self {
            eval_task,
            pretrain_tasks,
            demo_count: 4,
            window,
            datasets: Vec::new(),
            stride: window.horizon,
            context_task: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_tasks.contains(&self.eval_task) {
            return Err(IctpError::Protocol(format!(
                "evaluation task `{}` is among the pre-training tasks",
                self.eval_task
            )));
        }
        if self.pretrain_tasks.is_empty() {
            return Err(IctpError::EmptyTaskSet);
        }
        if self.stride == 0 {
            return Err(IctpError::Config("evaluation stride must be positive".into()));
        }
        self.window.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Ictp,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Ictp => "ictp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub task: TaskKind,
    pub dataset: String,
    pub horizon: usize,
    pub method: Method,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// One trained backbone to evaluate.
pub struct TrainedRun<'a> {
    pub seed: u64,
    pub model: &'a Model,
    pub params: &'a ParamStore,
    /// Tasks the parameters were trained on.
    pub trained_tasks: &'a [TaskKind],
}

/// Per-window errors of both methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScore {
    pub ictp_mse: f64,
    pub ictp_mae: f64,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

/// Scores of one channel's test windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScores {
    pub dataset: String,
    pub channel: String,
    pub scores: Vec<WindowScore>,
    /// Windows the baseline adapter cannot handle; excluded from both methods.
    pub skipped: usize,
}

/// Scores every test window of `protocol.eval_task` on every selected channel,
/// in store order.
pub fn score_windows(protocol: &EvalProtocol, run: &TrainedRun<'_>, store: &SeriesStore) -> Result<Vec<ChannelScores>> {
    protocol.validate()?;
    if let Some(t) = run.trained_tasks.iter().find(|t| **t == protocol.eval_task) {
        return Err(IctpError::Protocol(format!(
            "parameters were trained on the evaluation task `{t}`"
        )));
    }
    let w = protocol.window;
    run.model.config().check_geometry(w, &[protocol.demo_count])?;
    let adapter = adapter_for(run.model.config().variant, protocol.eval_task)?;
    let context_task = protocol.context_task.unwrap_or(protocol.eval_task);
    let p = run.model.config().patch_size;

    let mut out = Vec::new();
    let mut window_index = 0u64;
    for ch in &store.channels {
        let (train, test) = (&ch.train, &ch.test);
        if !protocol.datasets.is_empty() && !protocol.datasets.contains(&test.dataset) {
            continue;
        }
        debug_assert_eq!(test.split, Split::Test);
        let Some((lo, hi)) = w.valid_starts(protocol.eval_task, test.len()) else {
            continue;
        };
        let starts: Vec<(u64, usize)> = (lo..=hi)
            .step_by(protocol.stride)
            .map(|t| {
                window_index += 1;
                (window_index, t)
            })
            .collect();
        let scored: Vec<Option<WindowScore>> = starts
            .par_iter()
            .map(|&(idx, t)| {
                let mut rng = window_rng(run.seed, idx);
                let query = generate(protocol.eval_task, test, t, w, &mut rng)?;
                let adapted = match apply(adapter, &query, p) {
                    Ok(a) => a,
                    Err(IctpError::Adapter(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let demos = recent_demos(train, context_task, protocol.demo_count, w, None, &mut rng)?;
                let sample = concat_examples(&demos, &query)?;
                let ictp = run.model.predict(run.params, &sample)?;
                let base = adapted.predict(run.model, run.params)?;
                Ok(Some(WindowScore {
                    ictp_mse: mse(&ictp, &query.target)?,
                    ictp_mae: mae(&ictp, &query.target)?,
                    baseline_mse: mse(&base, &query.target)?,
                    baseline_mae: mae(&base, &query.target)?,
                }))
            })
            .collect::<Result<_>>()?;
        let skipped = scored.iter().filter(|s| s.is_none()).count();
        out.push(ChannelScores {
            dataset: test.dataset.clone(),
            channel: test.channel.clone(),
            scores: scored.into_iter().flatten().collect(),
            skipped,
        });
    }
    if out.iter().all(|c| c.scores.is_empty()) {
        return Err(IctpError::EmptyDataset(
            "no test window fits the evaluation task".into(),
        ));
    }
    Ok(out)
}

/// Evaluates each run and aggregates per dataset. Every run's parameter
/// checksum is compared before and after.
pub fn run_unseen_eval(protocol: &EvalProtocol, runs: &[TrainedRun<'_>], store: &SeriesStore) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for run in runs {
        let before = run.params.checksum();
        let scored = score_windows(protocol, run, store)?;
        if run.params.checksum() != before {
            return Err(IctpError::Protocol("parameters changed during evaluation".into()));
        }
        let mut by_dataset: BTreeMap<String, Vec<WindowScore>> = BTreeMap::new();
        for c in scored {
            by_dataset.entry(c.dataset).or_default().extend(c.scores);
        }
        for (dataset, s) in by_dataset {
            if s.is_empty() {
                continue;
            }
            let n = s.len() as f64;
            let mean = |f: fn(&WindowScore) -> f64| s.iter().map(f).sum::<f64>() / n;
            for (method, m, a) in [
                (Method::Baseline, mean(|x| x.baseline_mse), mean(|x| x.baseline_mae)),
                (Method::Ictp, mean(|x| x.ictp_mse), mean(|x| x.ictp_mae)),
            ] {
                rows.push(EvalRow {
                    variant: run.model.config().variant.to_string(),
                    task: protocol.eval_task,
                    dataset: dataset.clone(),
                    horizon: protocol.window.horizon,
                    method,
                    mse: m,
                    mae: a,
                    seed: run.seed,
                });
            }
        }
    }
    Ok(EvalReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Mae,
}

type CellKey = (String, TaskKind, String, usize, u64);

fn cell_key(r: &EvalRow) -> CellKey {
    (r.variant.clone(), r.task, r.dataset.clone(), r.horizon, r.seed)
}

/// Paired `(baseline, ictp)` rows per cell.
fn paired(rows: &[EvalRow]) -> Result<BTreeMap<CellKey, (EvalRow, EvalRow)>> {
    let mut cells: BTreeMap<CellKey, (Option<EvalRow>, Option<EvalRow>)> = BTreeMap::new();
    for r in rows {
        let slot = cells.entry(cell_key(r)).or_default();
        let target = match r.method {
            Method::Baseline => &mut slot.0,
            Method::Ictp => &mut slot.1,
        };
        if target.is_some() {
            return Err(IctpError::Protocol(format!(
                "duplicate {} row for {} / {} / seed {}",
                r.method, r.variant, r.dataset, r.seed
            )));
        }
        *target = Some(r.clone());
    }
    cells
        .into_iter()
        .map(|(k, (b, i))| match (b, i) {
            (Some(b), Some(i)) => Ok((k, (b, i))),
            _ => Err(IctpError::Protocol(format!(
                "cell {} / {} / seed {} lacks one of the two methods",
                k.0, k.2, k.4
            ))),
        })
        .collect()
}

/// Mean of `(baseline - ictp) / baseline` over every cell and each listed metric.
pub fn improvement_ratio_over(rows: &[EvalRow], metrics: &[Metric]) -> Result<f64> {
    let cells = paired(rows)?;
    if cells.is_empty() || metrics.is_empty() {
        return Err(IctpError::EmptyDataset("no paired cells".into()));
    }
    let mut ratios = Vec::new();
    for (b, i) in cells.values() {
        for m in metrics {
            let (bv, iv) = match m {
                Metric::Mse => (b.mse, i.mse),
                Metric::Mae => (b.mae, i.mae),
            };
            if bv == 0.0 {
                return Err(IctpError::Numerical(format!(
                    "baseline error is zero for {} / {}",
                    b.variant, b.dataset
                )));
            }
            ratios.push((bv - iv) / bv);
        }
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Improvement averaged over (cell, metric) pairs for both MSE and MAE.
pub fn improvement_ratio(report: &EvalReport) -> Result<f64> {
    improvement_ratio_over(&report.rows, &[Metric::Mse, Metric::Mae])
}

const HEADER: [&str; 8] = ["variant", "task", "dataset", "horizon", "method", "mse", "mae", "seed"];

impl EvalReport {
    /// Rows as CSV followed by a `#`-prefixed summary block.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        {
            let mut out = csv::Writer::from_writer(&mut w);
            out.write_record(HEADER)?;
            for r in &self.rows {
                out.write_record([
                    r.variant.clone(),
                    r.task.to_string(),
                    r.dataset.clone(),
                    r.horizon.to_string(),
                    r.method.to_string(),
                    r.mse.to_string(),
                    r.mae.to_string(),
                    r.seed.to_string(),
                ])?;
            }
            out.flush().map_err(|e| IctpError::io("eval report", e))?;
        }
        let io = |e| IctpError::io("eval report", e);
        writeln!(w, "# summary").map_err(io)?;
        for (name, metrics) in [
            ("improvement_ratio", &[Metric::Mse, Metric::Mae][..]),
            ("improvement_ratio_mse", &[Metric::Mse][..]),
            ("improvement_ratio_mae", &[Metric::Mae][..]),
        ] {
            match improvement_ratio_over(&self.rows, metrics) {
                Ok(v) => writeln!(w, "# {name},{v}").map_err(io)?,
                Err(e) => writeln!(w, "# {name},unavailable: {e}").map_err(io)?,
            }
        }
        Ok(())
    }

    /// Reads rows written by [`EvalReport::write_csv`]; the summary block is skipped.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").to_string();
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse()
                    .map_err(|_| IctpError::Config(format!("report column `{}` is not a number", HEADER[i])))
            };
            let int = |i: usize| -> Result<u64> {
                field(i)
                    .parse()
                    .map_err(|_| IctpError::Config(format!("report column `{}` is not an integer", HEADER[i])))
            };
            rows.push(EvalRow {
                variant: field(0),
                task: field(1).parse()?,
                dataset: field(2),
                horizon: int(3)? as usize,
                method: match field(4).as_str() {
                    "baseline" => Method::Baseline,
                    "ictp" => Method::Ictp,
                    other => return Err(IctpError::Config(format!("unknown method `{other}`"))),
                },
                mse: num(5)?,
                mae: num(6)?,
                seed: int(7)?,
            });
        }
        Ok(Self { rows })
    }

    /// Seed-averaged table: one line per `(variant, task, dataset, horizon)`
    /// with baseline and ictp MSE/MAE side by side.
    pub fn table(&self) -> Vec<TableRow> {
        let mut acc: BTreeMap<(String, TaskKind, String, usize), [Vec<f64>; 4]> = BTreeMap::new();
        for r in &self.rows {
            let e = acc
                .entry((r.variant.clone(), r.task, r.dataset.clone(), r.horizon))
                .or_default();
            let base = match r.method {
                Method::Baseline => 0,
                Method::Ictp => 2,
            };
            e[base].push(r.mse);
            e[base + 1].push(r.mae);
        }
        let mean = |v: &Vec<f64>| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        acc.into_iter()
            .map(|((variant, task, dataset, horizon), v)| TableRow {
                variant,
                task,
                dataset,
                horizon,
                baseline_mse: mean(&v[0]),
                baseline_mae: mean(&v[1]),
                ictp_mse: mean(&v[2]),
                ictp_mae: mean(&v[3]),
                seeds: v[0].len().max(v[2].len()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub variant: String,
    pub task: TaskKind,
    pub dataset: String,
    pub horizon: usize,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
    pub ictp_mse: f64,
    pub ictp_mae: f64,
    pub seeds: usize,
}
