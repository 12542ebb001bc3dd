//! Context construction: the multi-task rewrite of a raw series collection
//! into `(C_x ⊕ x, y)` training samples.
//!
//! For every query window a task is drawn uniformly from the task set, the
//! query example is generated, `m` demonstrations of the same task are drawn
//! from train windows that do not overlap the query, and everything is
//! flattened into one token stream:
//!
//! ```text
//! demo_1.input ++ demo_1.target ++ ... ++ demo_m.input ++ demo_m.target ++ query.input
//! ```
//!
//! Demonstration targets are emitted as answer tokens (`segment_flag = 1`);
//! there is no separator token.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IctpError, Result};
use crate::series::{ChannelSeries, Split};
use crate::task::{generate, SourceSpan, TaskExample, TaskKind, Token, WindowSpec};

/// Rejection-sampling attempts per demonstration before exhaustive enumeration.
pub const DEMO_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoOptions {
    /// Require demonstrations to be disjoint from each other as well as from the query.
    pub pairwise_disjoint_demos: bool,
    /// Allow demonstrations from other channels of the query's dataset.
    pub cross_channel_demos: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSequence {
    pub task: TaskKind,
    pub demos: Vec<TaskExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub query: SourceSpan,
    pub demos: Vec<SourceSpan>,
}

/// One context-following training or evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclSample {
    pub task: TaskKind,
    pub tokens: Vec<Token>,
    pub target: Vec<f64>,
    pub provenance: Provenance,
}

impl IclSample {
    pub fn demo_count(&self) -> usize {
        self.provenance.demos.len()
    }
}

/// Configuration echoed at the top of every serialized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub window: WindowSpec,
    /// Demonstration count of each merged build, in order.
    pub demo_counts: Vec<usize>,
    pub tasks: Vec<TaskKind>,
    pub seed: u64,
    pub stride: usize,
    pub options: DemoOptions,
    /// Resolved run configuration, when built from one.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IctpDataset {
    pub header: DatasetHeader,
    pub samples: Vec<IclSample>,
}

/// Counts from one dataset build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub emitted: usize,
    /// Windows whose task precondition failed (e.g. backtrace with `t < h`).
    pub skipped_precondition: usize,
    /// Windows without enough disjoint demonstration candidates.
    pub skipped_demos: usize,
}

impl BuildStats {
    fn add(&mut self, o: BuildStats) {
        self.emitted += o.emitted;
        self.skipped_precondition += o.skipped_precondition;
        self.skipped_demos += o.skipped_demos;
    }
}

fn check_task_set(tasks: &[TaskKind]) -> Result<()> {
    if tasks.is_empty() {
        return Err(IctpError::EmptyTaskSet);
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].contains(t) {
            return Err(IctpError::Config(format!("task `{t}` listed twice")));
        }
    }
    Ok(())
}

/// Uniform draw from the task set.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, tasks: &[TaskKind]) -> Result<TaskKind> {
    check_task_set(tasks)?;
    Ok(tasks[rng.random_range(0..tasks.len())])
}

/// Offsets `(a, b)` such that a window starting at `t` covers `[t + a, t + b)`.
fn span_offsets(task: TaskKind, w: WindowSpec) -> (isize, isize) {
    let (l, h) = (w.lookback as isize, w.horizon as isize);
    match task {
        TaskKind::Forecast => (0, l + h),
        TaskKind::Impute => (0, l),
        TaskKind::Backtrace => (-h, l),
    }
}

fn same_channel(s: &ChannelSeries, span: &SourceSpan) -> bool {
    s.dataset == span.dataset && s.channel == span.channel
}

fn eligible<'a>(
    pool: &'a [ChannelSeries],
    query: &SourceSpan,
    opts: DemoOptions,
) -> impl Iterator<Item = &'a ChannelSeries> + 'a {
    let query = query.clone();
    pool.iter().filter(move |s| {
        s.split == Split::Train
            && s.dataset == query.dataset
            && (opts.cross_channel_demos || s.channel == query.channel)
    })
}

/// Valid starts of `task` on `s` whose span misses the query span.
fn disjoint_count(s: &ChannelSeries, query: &SourceSpan, task: TaskKind, w: WindowSpec) -> usize {
    let Some((lo, hi)) = w.valid_starts(task, s.len()) else {
        return 0;
    };
    let total = hi - lo + 1;
    if !same_channel(s, query) {
        return total;
    }
    let (a, b) = span_offsets(task, w);
    let origin = s.origin_offset as isize;
    let (q0, q1) = (query.global().0 as isize, query.global().1 as isize);
    let (lo, hi) = (lo as isize, hi as isize);
    // before: origin + t + b <= q0
    let before = (q0 - origin - b).min(hi) - lo + 1;
    // after: origin + t + a >= q1
    let after = hi - (q1 - origin - a).max(lo) + 1;
    (before.max(0) + after.max(0)) as usize
}

fn candidate_span(s: &ChannelSeries, task: TaskKind, t: usize, w: WindowSpec) -> SourceSpan {
    let (a, b) = span_offsets(task, w);
    SourceSpan {
        dataset: s.dataset.clone(),
        channel: s.channel.clone(),
        split: s.split,
        start: (t as isize + a) as usize,
        end: (t as isize + b) as usize,
        origin: s.origin_offset,
    }
}

/// Draws `m` demonstrations of `task` from train windows disjoint from `query_span`.
///
/// Uniform rejection sampling (series, then start) for up to [`DEMO_ATTEMPTS`]
/// tries per demonstration, then uniform choice among all remaining valid
/// candidates.
pub fn sample_demos<R: Rng + ?Sized>(
    pool: &[ChannelSeries],
    query_span: &SourceSpan,
    task: TaskKind,
    m: usize,
    w: WindowSpec,
    rng: &mut R,
    opts: DemoOptions,
) -> Result<Vec<TaskExample>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let series: Vec<&ChannelSeries> = eligible(pool, query_span, opts)
        .filter(|s| w.valid_starts(task, s.len()).is_some())
        .collect();
    let available: usize = series
        .iter()
        .map(|s| disjoint_count(s, query_span, task, w))
        .sum();
    if available < m {
        return Err(IctpError::InsufficientDemos {
            requested: m,
            available,
        });
    }

    let mut chosen: Vec<SourceSpan> = Vec::with_capacity(m);
    let mut demos = Vec::with_capacity(m);
    let acceptable = |span: &SourceSpan, chosen: &[SourceSpan]| {
        !span.overlaps(query_span)
            && !(opts.pairwise_disjoint_demos && chosen.iter().any(|c| c.overlaps(span)))
    };
    for _ in 0..m {
        let mut pick = None;
        for _ in 0..DEMO_ATTEMPTS {
            let s = series[rng.random_range(0..series.len())];
            let (lo, hi) = w.valid_starts(task, s.len()).expect("filtered above");
            let t = rng.random_range(lo..=hi);
            let span = candidate_span(s, task, t, w);
            if acceptable(&span, &chosen) {
                pick = Some((s, t, span));
                break;
            }
        }
        if pick.is_none() {
            let all: Vec<(&ChannelSeries, usize, SourceSpan)> = series
                .iter()
                .flat_map(|&s| {
                    let (lo, hi) = w.valid_starts(task, s.len()).expect("filtered above");
                    (lo..=hi).map(move |t| (s, t, candidate_span(s, task, t, w)))
                })
                .filter(|(_, _, span)| acceptable(span, &chosen))
                .collect();
            if all.is_empty() {
                return Err(IctpError::InsufficientDemos {
                    requested: m,
                    available: chosen.len(),
                });
            }
            let i = rng.random_range(0..all.len());
            pick = all.into_iter().nth(i);
        }
        let (s, t, span) = pick.expect("set above");
        demos.push(generate(task, s, t, w, rng)?);
        chosen.push(span);
    }
    Ok(demos)
}

/// The `m` most recent pairwise-disjoint windows of `task` in `train`,
/// oldest first, excluding any that overlap `exclude`.
pub fn recent_demos<R: Rng + ?Sized>(
    train: &ChannelSeries,
    task: TaskKind,
    m: usize,
    w: WindowSpec,
    exclude: Option<&SourceSpan>,
    rng: &mut R,
) -> Result<Vec<TaskExample>> {
    if train.split != Split::Train {
        return Err(IctpError::Protocol(format!(
            "demonstrations must come from the train split, got {}",
            train.split
        )));
    }
    let mut starts = Vec::with_capacity(m);
    if let Some((lo, hi)) = w.valid_starts(task, train.len()) {
        let (a, b) = span_offsets(task, w);
        let width = (b - a) as usize;
        let mut t = hi as isize;
        while starts.len() < m && t >= lo as isize {
            let span = candidate_span(train, task, t as usize, w);
            if exclude.is_some_and(|q| q.overlaps(&span)) {
                t -= 1;
                continue;
            }
            starts.push(t as usize);
            t -= width as isize;
        }
    }
    if starts.len() < m {
        return Err(IctpError::InsufficientDemos {
            requested: m,
            available: starts.len(),
        });
    }
    starts.reverse();
    starts
        .into_iter()
        .map(|t| generate(task, train, t, w, rng))
        .collect()
}

/// Flattens demonstrations and the query into one token stream.
pub fn assemble(c: &ContextSequence, query: &TaskExample) -> Result<IclSample> {
    if c.task != query.task {
        return Err(IctpError::TaskMismatch {
            context: c.task,
            query: query.task,
        });
    }
    if let Some(d) = c.demos.iter().find(|d| d.task != c.task) {
        return Err(IctpError::TaskMismatch {
            context: c.task,
            query: d.task,
        });
    }
    concat_examples(&c.demos, query)
}

/// [`assemble`] without the task-agreement check, for deliberately
/// mismatched contexts.
pub fn concat_examples(demos: &[TaskExample], query: &TaskExample) -> Result<IclSample> {
    let (l, h) = (query.input.len(), query.target.len());
    let mut tokens = Vec::with_capacity(demos.len() * (l + h) + l);
    for d in demos {
        if d.input.len() != l || d.target.len() != h {
            return Err(IctpError::Geometry(format!(
                "demonstration is {}+{} steps, query is {l}+{h}",
                d.input.len(),
                d.target.len()
            )));
        }
        tokens.extend_from_slice(&d.input);
        tokens.extend(d.target.iter().map(|&v| Token::answer(v)));
    }
    tokens.extend_from_slice(&query.input);
    Ok(IclSample {
        task: query.task,
        tokens,
        target: query.target.clone(),
        provenance: Provenance {
            query: query.source_span.clone(),
            demos: demos.iter().map(|d| d.source_span.clone()).collect(),
        },
    })
}

/// Independent generator for the window with global index `index`.
pub fn window_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Query windows start at `0, stride, 2*stride, ...` on every train series.
///
/// Each window draws its own generator from `(seed, window index)`, so the
/// result does not depend on evaluation order.
pub fn build_ictp_dataset(
    series: &[ChannelSeries],
    tasks: &[TaskKind],
    w: WindowSpec,
    m: usize,
    stride: usize,
    seed: u64,
    opts: DemoOptions,
) -> Result<(IctpDataset, BuildStats)> {
    check_task_set(tasks)?;
    w.validate()?;
    if stride == 0 {
        return Err(IctpError::Config("stride must be positive".into()));
    }
    build_from(series, series, tasks, w, m, stride, seed, opts)
}

/// Query windows from `queries` (any split), demonstrations from `pool`,
/// which must hold train series only.
#[allow(clippy::too_many_arguments)]
pub fn build_from(
    queries: &[ChannelSeries],
    pool: &[ChannelSeries],
    tasks: &[TaskKind],
    w: WindowSpec,
    m: usize,
    stride: usize,
    seed: u64,
    opts: DemoOptions,
) -> Result<(IctpDataset, BuildStats)> {
    check_task_set(tasks)?;
    w.validate()?;
    if stride == 0 {
        return Err(IctpError::Config("stride must be positive".into()));
    }
    if let Some(s) = pool.iter().find(|s| s.split != Split::Train) {
        return Err(IctpError::Protocol(format!(
            "{} is a {} split; demonstrations may only come from train series",
            s.key(),
            s.split
        )));
    }
    let series = queries;

    let windows: Vec<(usize, usize)> = series
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            let last = s.len().checked_sub(w.lookback);
            last.into_iter()
                .flat_map(move |last| (0..=last).step_by(stride).map(move |t| (si, t)))
        })
        .collect();

    enum Outcome {
        Sample(Box<IclSample>),
        Precondition,
        Demos,
    }

    let outcomes: Vec<Result<Outcome>> = windows
        .par_iter()
        .enumerate()
        .map(|(idx, &(si, t))| {
            let mut rng = window_rng(seed, idx as u64);
            let task = sample_task(&mut rng, tasks)?;
            let query = match generate(task, &series[si], t, w, &mut rng) {
                Ok(q) => q,
                Err(IctpError::Window { .. }) => return Ok(Outcome::Precondition),
                Err(e) => return Err(e),
            };
            let demos = match sample_demos(pool, &query.source_span, task, m, w, &mut rng, opts) {
                Ok(d) => d,
                Err(IctpError::InsufficientDemos { .. }) => return Ok(Outcome::Demos),
                Err(e) => return Err(e),
            };
            let sample = assemble(&ContextSequence { task, demos }, &query)?;
            Ok(Outcome::Sample(Box::new(sample)))
        })
        .collect();

    let mut stats = BuildStats::default();
    let mut samples = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Sample(s) => {
                stats.emitted += 1;
                samples.push(*s);
            }
            Outcome::Precondition => stats.skipped_precondition += 1,
            Outcome::Demos => stats.skipped_demos += 1,
        }
    }
    if samples.is_empty() {
        return Err(IctpError::EmptyDataset(format!(
            "all {} query windows were skipped",
            windows.len()
        )));
    }
    Ok((
        IctpDataset {
            header: DatasetHeader {
                window: w,
                demo_counts: vec![m],
                tasks: tasks.to_vec(),
                seed,
                stride,
                options: opts,
                config: serde_json::Value::Null,
            },
            samples,
        },
        stats,
    ))
}

/// Settings of one dataset build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSpec {
    pub tasks: Vec<TaskKind>,
    pub window: WindowSpec,
    pub demo_counts: Vec<usize>,
    pub stride: usize,
    pub seed: u64,
    pub options: DemoOptions,
}

/// Runs [`build_from`] once per demonstration count and concatenates the
/// results. Build `i` uses seed `seed + i`.
pub fn build_mixed_dataset(
    queries: &[ChannelSeries],
    pool: &[ChannelSeries],
    spec: &BuildSpec,
) -> Result<(IctpDataset, BuildStats)> {
    if spec.demo_counts.is_empty() {
        return Err(IctpError::Config("no demonstration counts given".into()));
    }
    let mut stats = BuildStats::default();
    let mut samples = Vec::new();
    for (i, &m) in spec.demo_counts.iter().enumerate() {
        let seed = spec.seed.wrapping_add(i as u64);
        let (d, s) = build_from(queries, pool, &spec.tasks, spec.window, m, spec.stride, seed, spec.options)?;
        stats.add(s);
        samples.extend(d.samples);
    }
    Ok((
        IctpDataset {
            header: DatasetHeader {
                window: spec.window,
                demo_counts: spec.demo_counts.clone(),
                tasks: spec.tasks.clone(),
                seed: spec.seed,
                stride: spec.stride,
                options: spec.options,
                config: serde_json::Value::Null,
            },
            samples,
        },
        stats,
    ))
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    header: DatasetHeader,
}

impl IctpDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// JSON lines: one header record, then one record per sample.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = HeaderRecord {
            header: self.header.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| IctpError::io("jsonl", e))?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| IctpError::io("jsonl", e))?;
        }
        w.flush().map_err(|e| IctpError::io("jsonl", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| IctpError::io(path.display().to_string(), e))?;
        self.write_jsonl(BufWriter::new(f))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| IctpError::EmptyDataset("missing header record".into()))?
            .map_err(|e| IctpError::io("jsonl", e))?;
        let HeaderRecord { header } = serde_json::from_str(&first)?;
        let mut samples = Vec::new();
        for line in lines {
            let line = line.map_err(|e| IctpError::io("jsonl", e))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line)?);
        }
        Ok(Self { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)
            .map_err(|_| IctpError::MissingInput(format!("{}: missing dataset", path.display())))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{gen_forecast, gen_impute};

    fn series(n: usize) -> ChannelSeries {
        ChannelSeries {
            dataset: "d".into(),
            channel: "c".into(),
            split: Split::Train,
            values: (0..n).map(|i| (i as f64 * 0.3).sin()).collect(),
            origin_offset: 0,
        }
    }

    fn w42() -> WindowSpec {
        WindowSpec::new(4, 2).unwrap()
    }

    /// Brute-force count of disjoint candidate windows.
    fn brute_count(s: &ChannelSeries, q: &SourceSpan, task: TaskKind, w: WindowSpec) -> usize {
        (0..s.len())
            .filter(|&t| {
                let Some((a, b)) = w.span(task, t) else { return false };
                b <= s.len() && !candidate_span(s, task, t, w).overlaps(q) && a < b
            })
            .count()
    }

    #[test]
    fn singleton_task_set() {
        let mut rng = window_rng(1, 0);
        for _ in 0..50 {
            assert_eq!(sample_task(&mut rng, &[TaskKind::Forecast]).unwrap(), TaskKind::Forecast);
        }
        assert!(matches!(sample_task(&mut rng, &[]), Err(IctpError::EmptyTaskSet)));
    }

    #[test]
    fn task_draws_are_balanced() {
        // Binomial(10000, 0.5): sigma = 50, so 3 sigma = 150.
        let mut rng = window_rng(42, 0);
        let tasks = [TaskKind::Forecast, TaskKind::Impute];
        let forecast = (0..10_000)
            .filter(|_| sample_task(&mut rng, &tasks).unwrap() == TaskKind::Forecast)
            .count() as i64;
        assert!((forecast - 5000).abs() <= 150, "{forecast}");
    }

    #[test]
    fn demos_avoid_the_query() {
        let s = series(40);
        let q = gen_forecast(&s, 0, w42()).unwrap();
        for seed in 0..50 {
            let mut rng = window_rng(seed, 0);
            let d = sample_demos(
                std::slice::from_ref(&s),
                &q.source_span,
                TaskKind::Forecast,
                1,
                w42(),
                &mut rng,
                DemoOptions::default(),
            )
            .unwrap();
            assert_eq!(d.len(), 1);
            assert!(d[0].source_span.start >= 6 && d[0].source_span.end <= 40);
        }
    }

    #[test]
    fn too_many_demos_reports_available_count() {
        // length 14, forecast windows cover 6 steps, query covers [2, 8): only t = 8 is disjoint
        let s = series(14);
        let q = gen_forecast(&s, 2, w42()).unwrap();
        let available = brute_count(&s, &q.source_span, TaskKind::Forecast, w42());
        assert_eq!(available, 1);
        assert_eq!(disjoint_count(&s, &q.source_span, TaskKind::Forecast, w42()), available);
        let mut rng = window_rng(0, 0);
        let err = sample_demos(
            std::slice::from_ref(&s),
            &q.source_span,
            TaskKind::Forecast,
            3,
            w42(),
            &mut rng,
            DemoOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            IctpError::InsufficientDemos {
                requested: 3,
                available: 1
            }
        ));
    }

    #[test]
    fn disjoint_count_matches_brute_force() {
        let w = WindowSpec::new(8, 4).unwrap();
        for n in [12, 20, 33, 60] {
            let s = series(n);
            for t in 0..n {
                for task in TaskKind::ALL {
                    let Some((a, b)) = w.span(task, t) else { continue };
                    if b > n {
                        continue;
                    }
                    let q = SourceSpan {
                        dataset: "d".into(),
                        channel: "c".into(),
                        split: Split::Train,
                        start: a,
                        end: b,
                        origin: 0,
                    };
                    for dtask in TaskKind::ALL {
                        assert_eq!(
                            disjoint_count(&s, &q, dtask, w),
                            brute_count(&s, &q, dtask, w),
                            "n={n} t={t} {task} {dtask}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_demos_is_empty() {
        let s = series(10);
        let q = gen_forecast(&s, 0, w42()).unwrap();
        let mut rng = window_rng(0, 0);
        let d = sample_demos(&[], &q.source_span, TaskKind::Forecast, 0, w42(), &mut rng, DemoOptions::default())
            .unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn pairwise_mode_separates_demos() {
        let s = series(80);
        let q = gen_forecast(&s, 0, w42()).unwrap();
        let opts = DemoOptions {
            pairwise_disjoint_demos: true,
            ..Default::default()
        };
        for seed in 0..30 {
            let mut rng = window_rng(seed, 3);
            let d = sample_demos(std::slice::from_ref(&s), &q.source_span, TaskKind::Forecast, 8, w42(), &mut rng, opts)
                .unwrap();
            for i in 0..d.len() {
                for j in 0..i {
                    assert!(!d[i].source_span.overlaps(&d[j].source_span));
                }
            }
        }
    }

    #[test]
    fn cross_channel_mode_uses_sibling_channels() {
        let a = series(12);
        let mut b = series(40);
        b.channel = "other".into();
        let q = gen_forecast(&a, 3, w42()).unwrap();
        let pool = vec![a.clone(), b];
        let mut rng = window_rng(0, 0);
        assert!(sample_demos(&pool, &q.source_span, TaskKind::Forecast, 2, w42(), &mut rng, DemoOptions::default())
            .is_err());
        let opts = DemoOptions {
            cross_channel_demos: true,
            ..Default::default()
        };
        let d = sample_demos(&pool, &q.source_span, TaskKind::Forecast, 2, w42(), &mut rng, opts).unwrap();
        assert!(d.iter().all(|e| e.source_span.channel == "other"));
    }

    #[test]
    fn assemble_identity_and_flags() {
        let s = series(40);
        let q = gen_forecast(&s, 20, w42()).unwrap();
        let empty = ContextSequence {
            task: TaskKind::Forecast,
            demos: vec![],
        };
        let out = assemble(&empty, &q).unwrap();
        assert_eq!(out.tokens, q.input);

        let demos = vec![gen_forecast(&s, 0, w42()).unwrap(), gen_forecast(&s, 6, w42()).unwrap()];
        let c = ContextSequence {
            task: TaskKind::Forecast,
            demos: demos.clone(),
        };
        let out = assemble(&c, &q).unwrap();
        let flags: Vec<u8> = out.tokens.iter().map(|t| u8::from(t.answer)).collect();
        assert_eq!(flags, vec![0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0]);
        let mut expect: Vec<f64> = Vec::new();
        for d in &demos {
            expect.extend(d.input.iter().map(|t| t.value));
            expect.extend(&d.target);
        }
        expect.extend(q.input.iter().map(|t| t.value));
        assert_eq!(out.tokens.iter().map(|t| t.value).collect::<Vec<_>>(), expect);
        assert!(out.tokens.iter().all(|t| !t.masked));
    }

    #[test]
    fn assemble_paper_geometry() {
        let w = WindowSpec::from_horizon(96).unwrap();
        let s = series(2000);
        let q = gen_forecast(&s, 1500, w).unwrap();
        let demos = (0..4).map(|i| gen_forecast(&s, i * 300, w).unwrap()).collect();
        let out = assemble(
            &ContextSequence {
                task: TaskKind::Forecast,
                demos,
            },
            &q,
        )
        .unwrap();
        assert_eq!(out.tokens.len(), 1344);
    }

    #[test]
    fn assemble_rejects_mismatches() {
        let s = series(40);
        let q = gen_forecast(&s, 20, w42()).unwrap();
        let mut rng = window_rng(0, 0);
        let imp = gen_impute(&s, 0, w42(), &mut rng).unwrap();
        let c = ContextSequence {
            task: TaskKind::Impute,
            demos: vec![imp],
        };
        assert!(matches!(assemble(&c, &q), Err(IctpError::TaskMismatch { .. })));
        let long = gen_forecast(&s, 0, WindowSpec::new(6, 3).unwrap()).unwrap();
        let c = ContextSequence {
            task: TaskKind::Forecast,
            demos: vec![long],
        };
        assert!(matches!(assemble(&c, &q), Err(IctpError::Geometry(_))));
    }

    #[test]
    fn single_window_build() {
        let s = series(6);
        let (d, stats) =
            build_ictp_dataset(&[s], &[TaskKind::Forecast], w42(), 0, 1, 7, DemoOptions::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(stats.emitted, 1);
        assert_eq!(stats.skipped_precondition, 2);
    }

    #[test]
    fn stride_enumeration_count() {
        // valid forecast starts: t in {0, 4, ..., 48} since t + 12 <= 60
        let oracle = (0..60).step_by(4).filter(|t| t + 12 <= 60).count();
        assert_eq!(oracle, 13);
        let w = WindowSpec::new(8, 4).unwrap();
        let (d, _) =
            build_ictp_dataset(&[series(60)], &[TaskKind::Forecast], w, 0, 4, 1, DemoOptions::default()).unwrap();
        assert_eq!(d.len(), oracle);
    }

    #[test]
    fn build_is_deterministic_and_serializes_identically() {
        let pool = vec![series(120), {
            let mut s = series(90);
            s.channel = "b".into();
            s
        }];
        let tasks = [TaskKind::Forecast, TaskKind::Impute, TaskKind::Backtrace];
        let run = || {
            let (d, _) = build_ictp_dataset(&pool, &tasks, w42(), 2, 3, 11, DemoOptions::default()).unwrap();
            let mut buf = Vec::new();
            d.write_jsonl(&mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let back = IctpDataset::read_jsonl(&a[..]).unwrap();
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn build_rejects_non_train_series_and_zero_stride() {
        let mut s = series(50);
        s.split = Split::Test;
        assert!(matches!(
            build_ictp_dataset(&[s], &[TaskKind::Forecast], w42(), 0, 1, 0, DemoOptions::default()),
            Err(IctpError::Protocol(_))
        ));
        assert!(build_ictp_dataset(&[series(50)], &[TaskKind::Forecast], w42(), 0, 0, 0, DemoOptions::default())
            .is_err());
        assert!(matches!(
            build_ictp_dataset(&[series(3)], &[TaskKind::Forecast], w42(), 0, 1, 0, DemoOptions::default()),
            Err(IctpError::EmptyDataset(_))
        ));
    }

    #[test]
    fn held_out_queries_draw_demos_from_train() {
        let train = series(60);
        let mut valid = series(30);
        valid.split = Split::Valid;
        valid.origin_offset = 60;
        let (d, _) = build_from(
            std::slice::from_ref(&valid),
            std::slice::from_ref(&train),
            &[TaskKind::Forecast],
            w42(),
            2,
            3,
            0,
            DemoOptions::default(),
        )
        .unwrap();
        for s in &d.samples {
            assert_eq!(s.provenance.query.split, Split::Valid);
            assert!(s.provenance.demos.iter().all(|d| d.split == Split::Train));
        }
        assert!(build_from(&[train.clone()], &[valid], &[TaskKind::Forecast], w42(), 1, 1, 0, DemoOptions::default())
            .is_err());
    }

    #[test]
    fn mixed_build_concatenates_demo_counts() {
        let pool = vec![series(80)];
        let spec = BuildSpec {
            tasks: vec![TaskKind::Forecast, TaskKind::Impute],
            window: w42(),
            demo_counts: vec![0, 2],
            stride: 4,
            seed: 1,
            options: DemoOptions::default(),
        };
        let (d, stats) = build_mixed_dataset(&pool, &pool, &spec).unwrap();
        assert_eq!(d.header.demo_counts, vec![0, 2]);
        assert_eq!(stats.emitted, d.len());
        let counts: Vec<usize> = d.samples.iter().map(|s| s.demo_count()).collect();
        let first = counts.iter().take_while(|&&c| c == 0).count();
        assert!(first > 0 && counts[first..].iter().all(|&c| c == 2));
    }

    #[test]
    fn recent_demos_are_latest_disjoint_windows() {
        let s = series(50);
        let mut rng = window_rng(0, 0);
        let d = recent_demos(&s, TaskKind::Forecast, 3, w42(), None, &mut rng).unwrap();
        let starts: Vec<usize> = d.iter().map(|e| e.source_span.start).collect();
        assert_eq!(starts, vec![32, 38, 44]);
        let d = recent_demos(&s, TaskKind::Backtrace, 2, w42(), None, &mut rng).unwrap();
        let spans: Vec<(usize, usize)> = d.iter().map(|e| (e.source_span.start, e.source_span.end)).collect();
        assert_eq!(spans, vec![(38, 44), (44, 50)]);
        assert!(recent_demos(&series(10), TaskKind::Forecast, 3, w42(), None, &mut rng).is_err());
    }
}
