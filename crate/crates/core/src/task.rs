//! Window-level example constructors for the three tasks.
//!
//! Every generator reads one [`ChannelSeries`] and returns a [`TaskExample`]
//! whose input has `L` tokens and whose target has `h` values, so the three
//! tasks are interchangeable inside a context sequence.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{IctpError, Result};
use crate::series::{ChannelSeries, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Forecast,
    Impute,
    Backtrace,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Forecast, TaskKind::Impute, TaskKind::Backtrace];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Forecast => "forecast",
            TaskKind::Impute => "impute",
            TaskKind::Backtrace => "backtrace",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = IctpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(TaskKind::Forecast),
            "impute" => Ok(TaskKind::Impute),
            "backtrace" => Ok(TaskKind::Backtrace),
            other => Err(IctpError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Lookback `L` and horizon `h`, with `L = 2h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize) -> Result<Self> {
        let w = Self { lookback, horizon };
        w.validate()?;
        Ok(w)
    }

    /// Window with `L = 2h`.
    pub fn from_horizon(horizon: usize) -> Result<Self> {
        Self::new(2 * horizon, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 || self.lookback < 2 || self.lookback != 2 * self.horizon {
            return Err(IctpError::Config(format!(
                "window lookback={} horizon={} must satisfy L = 2h, h >= 1",
                self.lookback, self.horizon
            )));
        }
        Ok(())
    }

    /// Steps one demonstration occupies in a context (`L + h`).
    pub fn demo_len(&self) -> usize {
        self.lookback + self.horizon
    }

    /// Source span of a window of `task` whose input starts at `t`.
    pub fn span(&self, task: TaskKind, t: usize) -> Option<(usize, usize)> {
        let (l, h) = (self.lookback, self.horizon);
        match task {
            TaskKind::Forecast => Some((t, t + l + h)),
            TaskKind::Impute => Some((t, t + l)),
            TaskKind::Backtrace => t.checked_sub(h).map(|s| (s, t + l)),
        }
    }

    /// Inclusive range of valid input starts for `task` on a series of length `n`.
    pub fn valid_starts(&self, task: TaskKind, n: usize) -> Option<(usize, usize)> {
        let (l, h) = (self.lookback, self.horizon);
        let (lo, need) = match task {
            TaskKind::Forecast => (0, l + h),
            TaskKind::Impute => (0, l),
            TaskKind::Backtrace => (h, l),
        };
        let hi = n.checked_sub(need)?;
        (lo <= hi).then_some((lo, hi))
    }
}

/// One time step as seen by the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub value: f64,
    /// Value hidden from the model; `value` is 0 when set.
    pub masked: bool,
    /// Part of an answer segment (demonstration target or placeholder).
    pub answer: bool,
}

impl Token {
    pub fn observed(value: f64) -> Self {
        Self {
            value,
            masked: false,
            answer: false,
        }
    }

    pub fn answer(value: f64) -> Self {
        Self {
            value,
            masked: false,
            answer: true,
        }
    }

    pub fn mask() -> Self {
        Self {
            value: 0.0,
            masked: true,
            answer: false,
        }
    }

    /// Masked answer slot the model must fill.
    pub fn placeholder() -> Self {
        Self {
            value: 0.0,
            masked: true,
            answer: true,
        }
    }

    pub fn features(&self) -> [f64; 3] {
        [
            self.value,
            f64::from(u8::from(self.masked)),
            f64::from(u8::from(self.answer)),
        ]
    }
}

// Serialized as a `[value, mask_flag, segment_flag]` triple.
impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.value, u8::from(self.masked), u8::from(self.answer)).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (value, m, a): (f64, u8, u8) = Deserialize::deserialize(d)?;
        if m > 1 || a > 1 {
            return Err(serde::de::Error::custom("token flags must be 0 or 1"));
        }
        if m == 1 && value != 0.0 {
            return Err(serde::de::Error::custom("masked token with nonzero value"));
        }
        Ok(Token {
            value,
            masked: m == 1,
            answer: a == 1,
        })
    }
}

/// Half-open index range `[start, end)` into a named series split.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceSpan {
    pub dataset: String,
    pub channel: String,
    pub split: Split,
    pub start: usize,
    pub end: usize,
    /// `origin_offset` of the series the indices refer to.
    pub origin: usize,
}

impl SourceSpan {
    fn of(s: &ChannelSeries, (start, end): (usize, usize)) -> Self {
        Self {
            dataset: s.dataset.clone(),
            channel: s.channel.clone(),
            split: s.split,
            start,
            end,
            origin: s.origin_offset,
        }
    }

    /// Range on the parent dataset timeline.
    pub fn global(&self) -> (usize, usize) {
        (self.origin + self.start, self.origin + self.end)
    }

    /// Whether the spans share a time step of the same channel.
    pub fn overlaps(&self, other: &SourceSpan) -> bool {
        if self.dataset != other.dataset || self.channel != other.channel {
            return false;
        }
        let (a0, a1) = self.global();
        let (b0, b1) = other.global();
        a0 < b1 && b0 < a1
    }
}

/// An `(x, y = f_k(x))` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskKind,
    pub input: Vec<Token>,
    pub target: Vec<f64>,
    pub source_span: SourceSpan,
}

fn out_of_range(task: TaskKind, t: usize, w: WindowSpec, n: usize) -> IctpError {
    IctpError::Window {
        task,
        start: t,
        reason: format!(
            "window out of range (L={}, h={}, series length {n})",
            w.lookback, w.horizon
        ),
    }
}

/// Input `s[t..t+L)`, target `s[t+L..t+L+h)`.
pub fn gen_forecast(s: &ChannelSeries, t: usize, w: WindowSpec) -> Result<TaskExample> {
    let (l, h) = (w.lookback, w.horizon);
    if t + l + h > s.len() {
        return Err(out_of_range(TaskKind::Forecast, t, w, s.len()));
    }
    Ok(TaskExample {
        task: TaskKind::Forecast,
        input: s.values[t..t + l].iter().map(|&v| Token::observed(v)).collect(),
        target: s.values[t + l..t + l + h].to_vec(),
        source_span: SourceSpan::of(s, (t, t + l + h)),
    })
}

/// Input `s[t..t+L)`, target the `h` preceding values `s[t-h..t)`, oldest first.
pub fn gen_backtrace(s: &ChannelSeries, t: usize, w: WindowSpec) -> Result<TaskExample> {
    let (l, h) = (w.lookback, w.horizon);
    if t < h {
        return Err(IctpError::Window {
            task: TaskKind::Backtrace,
            start: t,
            reason: format!("insufficient history: need {h} steps before the window"),
        });
    }
    if t + l > s.len() {
        return Err(out_of_range(TaskKind::Backtrace, t, w, s.len()));
    }
    Ok(TaskExample {
        task: TaskKind::Backtrace,
        input: s.values[t..t + l].iter().map(|&v| Token::observed(v)).collect(),
        target: s.values[t - h..t].to_vec(),
        source_span: SourceSpan::of(s, (t - h, t + l)),
    })
}

/// Draws `count` distinct positions from `0..len` (partial Fisher-Yates),
/// returned in ascending order.
pub fn sample_mask_positions<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    assert!(count <= len);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.random_range(i..len);
        pool.swap(i, j);
    }
    let mut picked = pool[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Masks `h` uniformly chosen positions of `s[t..t+L)`; the target holds the
/// hidden values in ascending position order.
pub fn gen_impute<R: Rng + ?Sized>(
    s: &ChannelSeries,
    t: usize,
    w: WindowSpec,
    rng: &mut R,
) -> Result<TaskExample> {
    let (l, h) = (w.lookback, w.horizon);
    if h >= l {
        return Err(IctpError::Window {
            task: TaskKind::Impute,
            start: t,
            reason: format!("mask count {h} must be below the window length {l}"),
        });
    }
    if t + l > s.len() {
        return Err(out_of_range(TaskKind::Impute, t, w, s.len()));
    }
    let window = &s.values[t..t + l];
    let positions = sample_mask_positions(l, h, rng);
    let mut input: Vec<Token> = window.iter().map(|&v| Token::observed(v)).collect();
    for &p in &positions {
        input[p] = Token::mask();
    }
    Ok(TaskExample {
        task: TaskKind::Impute,
        input,
        target: positions.iter().map(|&p| window[p]).collect(),
        source_span: SourceSpan::of(s, (t, t + l)),
    })
}

/// Dispatches to the generator for `task`.
pub fn generate<R: Rng + ?Sized>(
    task: TaskKind,
    s: &ChannelSeries,
    t: usize,
    w: WindowSpec,
    rng: &mut R,
) -> Result<TaskExample> {
    match task {
        TaskKind::Forecast => gen_forecast(s, t, w),
        TaskKind::Backtrace => gen_backtrace(s, t, w),
        TaskKind::Impute => gen_impute(s, t, w, rng),
    }
}

/// Input start index of an example, recovered from its span.
pub fn input_start(e: &TaskExample, w: WindowSpec) -> usize {
    match e.task {
        TaskKind::Backtrace => e.source_span.start + w.horizon,
        _ => e.source_span.start,
    }
}

/// Positions of masked tokens in an example's input.
pub fn masked_positions(e: &TaskExample) -> Vec<usize> {
    e.input
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.masked.then_some(i))
        .collect()
}
