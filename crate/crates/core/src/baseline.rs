//! Naive input reprogramming: rewrite an unseen-task example into the shape
//! of a task the backbone already handles, run it without demonstrations,
//! and map the outputs back. Parameters are never touched.

use ictp_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{IctpError, Result};
use crate::model::{Model, Variant};
use crate::task::{masked_positions, TaskExample, TaskKind, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterKind {
    BacktraceFlip,
    ImputeTruncate,
    EncoderConcatMask,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::BacktraceFlip => "backtrace-flip",
            AdapterKind::ImputeTruncate => "impute-truncate",
            AdapterKind::EncoderConcatMask => "encoder-concat-mask",
        })
    }
}

/// A forecasting-shaped query plus the map from its outputs back to the
/// original target order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub tokens: Vec<Token>,
    /// Number of steps the model is asked to produce.
    pub horizon: usize,
    /// `readout[i]` is the index of the raw prediction scored against target `i`.
    pub readout: Vec<usize>,
}

impl Adapted {
    pub fn map_predictions(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.horizon {
            return Err(IctpError::Adapter(format!(
                "expected {} predictions, got {}",
                self.horizon,
                raw.len()
            )));
        }
        Ok(self.readout.iter().map(|&i| raw[i]).collect())
    }

    /// Runs the frozen model and returns predictions in target order.
    pub fn predict(&self, model: &Model, params: &ParamStore) -> Result<Vec<f64>> {
        let raw = model.predict_tokens(params, &self.tokens, self.horizon)?;
        self.map_predictions(&raw)
    }
}

/// Adapter used for an unseen `task` on a backbone `variant`.
pub fn adapter_for(variant: Variant, task: TaskKind) -> Result<AdapterKind> {
    match (variant, task) {
        (Variant::DecoderCausal, TaskKind::Backtrace) => Ok(AdapterKind::BacktraceFlip),
        (_, TaskKind::Impute) => Ok(AdapterKind::ImputeTruncate),
        (Variant::EncoderMasked, _) => Ok(AdapterKind::EncoderConcatMask),
        (Variant::DecoderCausal, TaskKind::Forecast) => Err(IctpError::Adapter(
            "no adapter maps forecasting onto a decoder's native task".into(),
        )),
    }
}

fn round_up(n: usize, p: usize) -> usize {
    n.div_ceil(p) * p
}

fn expect_task(e: &TaskExample, want: &[TaskKind], adapter: AdapterKind) -> Result<()> {
    if want.contains(&e.task) {
        Ok(())
    } else {
        Err(IctpError::Adapter(format!("{adapter} cannot take a {} example", e.task)))
    }
}

/// Reverses a token sequence in time.
pub fn flip(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().rev().copied().collect()
}

/// Feeds the reversed input as a forecasting query; prediction `k` is the
/// value `k + 1` steps before the window, so target `i` reads `h - 1 - i`.
pub fn adapt_backtrace_flip(e: &TaskExample) -> Result<Adapted> {
    expect_task(e, &[TaskKind::Backtrace], AdapterKind::BacktraceFlip)?;
    let h = e.target.len();
    Ok(Adapted {
        tokens: flip(&e.input),
        horizon: h,
        readout: (0..h).rev().collect(),
    })
}

/// Forecasts across the masked hull `[first, last]` from the observed prefix
/// when the hull's midpoint is at or past `L/2`, otherwise from the reversed
/// observed suffix.
///
/// The history is left-padded with mask tokens to `pad_to` steps (at least a
/// multiple of `patch`), and the forecast length is the hull rounded up to a
/// multiple of `patch`.
pub fn adapt_impute_truncate(e: &TaskExample, pad_to: usize, patch: usize) -> Result<Adapted> {
    expect_task(e, &[TaskKind::Impute], AdapterKind::ImputeTruncate)?;
    let l = e.input.len();
    let masked = masked_positions(e);
    let (Some(&first), Some(&last)) = (masked.first(), masked.last()) else {
        return Err(IctpError::Adapter("impute example has no masked positions".into()));
    };
    if first == 0 && last == l - 1 {
        return Err(IctpError::Adapter(
            "masked span touches both ends, no usable context".into(),
        ));
    }
    let hull = last - first + 1;
    let horizon = round_up(hull, patch);
    let (history, readout): (Vec<Token>, Vec<usize>) = if first + last >= l {
        (e.input[..first].to_vec(), masked.iter().map(|&q| q - first).collect())
    } else {
        (flip(&e.input[last + 1..]), masked.iter().map(|&q| last - q).collect())
    };
    let len = round_up(history.len().max(pad_to), patch);
    let mut tokens = vec![Token::mask(); len - history.len()];
    tokens.extend(history);
    Ok(Adapted {
        tokens,
        horizon,
        readout,
    })
}

/// Input tokens followed by `h` masked steps for the encoder to reconstruct.
/// Backtrace examples are flipped first.
pub fn adapt_encoder_concat(e: &TaskExample) -> Result<Adapted> {
    expect_task(e, &[TaskKind::Forecast, TaskKind::Backtrace], AdapterKind::EncoderConcatMask)?;
    if e.task == TaskKind::Backtrace {
        return adapt_backtrace_flip(e);
    }
    let h = e.target.len();
    Ok(Adapted {
        tokens: e.input.clone(),
        horizon: h,
        readout: (0..h).collect(),
    })
}

pub fn apply(kind: AdapterKind, e: &TaskExample, patch: usize) -> Result<Adapted> {
    match kind {
        AdapterKind::BacktraceFlip => adapt_backtrace_flip(e),
        AdapterKind::ImputeTruncate => adapt_impute_truncate(e, e.input.len(), patch),
        AdapterKind::EncoderConcatMask => adapt_encoder_concat(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::with_placeholders;
    use crate::series::Split;
    use crate::task::SourceSpan;
    use proptest::prelude::*;

    fn span() -> SourceSpan {
        SourceSpan {
            dataset: "d".into(),
            channel: "c".into(),
            split: Split::Test,
            start: 0,
            end: 0,
            origin: 0,
        }
    }

    fn example(task: TaskKind, input: Vec<Token>, target: Vec<f64>) -> TaskExample {
        TaskExample {
            task,
            input,
            target,
            source_span: span(),
        }
    }

    fn obs(v: &[f64]) -> Vec<Token> {
        v.iter().map(|&x| Token::observed(x)).collect()
    }

    fn impute(l: usize, masked: &[usize]) -> TaskExample {
        let mut input = obs(&(0..l).map(|i| i as f64).collect::<Vec<_>>());
        for &q in masked {
            input[q] = Token::mask();
        }
        example(TaskKind::Impute, input, masked.iter().map(|&q| q as f64).collect())
    }

    #[test]
    fn flip_hand_example() {
        let e = example(TaskKind::Backtrace, obs(&[2.0, 3.0, 4.0, 5.0]), vec![0.0, 1.0]);
        let a = adapt_backtrace_flip(&e).unwrap();
        assert_eq!(a.tokens, obs(&[5.0, 4.0, 3.0, 2.0]));
        assert_eq!(a.map_predictions(&[10.0, 20.0]).unwrap(), vec![20.0, 10.0]);
        let palindrome = obs(&[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(flip(&palindrome), palindrome);
    }

    #[test]
    fn flip_rejects_other_tasks() {
        let e = example(TaskKind::Forecast, obs(&[1.0, 2.0]), vec![3.0]);
        assert!(matches!(adapt_backtrace_flip(&e), Err(IctpError::Adapter(_))));
    }

    #[test]
    fn impute_prefix_branch() {
        let a = adapt_impute_truncate(&impute(8, &[6, 7]), 0, 1).unwrap();
        assert_eq!(a.tokens, obs(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(a.horizon, 2);
        assert_eq!(a.map_predictions(&[6.5, 7.5]).unwrap(), vec![6.5, 7.5]);
    }

    #[test]
    fn impute_suffix_branch() {
        let a = adapt_impute_truncate(&impute(8, &[0, 1]), 0, 1).unwrap();
        assert_eq!(a.tokens, obs(&[7.0, 6.0, 5.0, 4.0, 3.0, 2.0]));
        // raw[0] is the step just before the suffix, position 1
        assert_eq!(a.map_predictions(&[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn impute_pads_and_rounds_to_patches() {
        let a = adapt_impute_truncate(&impute(8, &[5, 7]), 8, 4).unwrap();
        assert_eq!(a.tokens.len(), 8);
        assert!(a.tokens[..3].iter().all(|t| t.masked));
        assert_eq!(a.horizon, 4);
        assert_eq!(a.readout, vec![0, 2]);
    }

    #[test]
    fn impute_degenerate_masks() {
        assert!(adapt_impute_truncate(&impute(4, &[0, 1, 2, 3]), 0, 1).is_err());
        assert!(adapt_impute_truncate(&impute(6, &[0, 5]), 0, 1).is_err());
    }

    #[test]
    fn encoder_concat_shapes() {
        let e = example(TaskKind::Forecast, obs(&[1.0, 2.0, 3.0, 4.0]), vec![5.0, 6.0]);
        let a = adapt_encoder_concat(&e).unwrap();
        let full = with_placeholders(&a.tokens, a.horizon);
        assert_eq!(full.len(), 6);
        assert!(full[4..].iter().all(|t| t.masked));
        assert!(full[..4].iter().all(|t| !t.masked));

        let b = example(TaskKind::Backtrace, obs(&[1.0, 2.0, 3.0, 4.0]), vec![5.0, 6.0]);
        assert_eq!(adapt_encoder_concat(&b).unwrap(), adapt_backtrace_flip(&b).unwrap());
        assert!(adapt_encoder_concat(&impute(4, &[1])).is_err());
    }

    #[test]
    fn adapter_table() {
        assert_eq!(adapter_for(Variant::DecoderCausal, TaskKind::Backtrace).unwrap(), AdapterKind::BacktraceFlip);
        assert_eq!(adapter_for(Variant::DecoderCausal, TaskKind::Impute).unwrap(), AdapterKind::ImputeTruncate);
        assert_eq!(adapter_for(Variant::EncoderMasked, TaskKind::Forecast).unwrap(), AdapterKind::EncoderConcatMask);
        assert_eq!(adapter_for(Variant::EncoderMasked, TaskKind::Backtrace).unwrap(), AdapterKind::EncoderConcatMask);
        assert!(adapter_for(Variant::DecoderCausal, TaskKind::Forecast).is_err());
    }

    /// A forecaster that is exact on a time-reversible series stays exact on
    /// backtracing through the flip.
    #[test]
    fn flip_is_exact_for_exact_forecaster_on_reversible_series() {
        let series: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5).powi(2)).collect();
        let rev: Vec<f64> = series.iter().rev().copied().collect();
        assert_eq!(series, rev);
        // backtrace window at t=6, L=4, h=2: target series[4..6]
        let e = example(TaskKind::Backtrace, obs(&series[6..10]), series[4..6].to_vec());
        let a = adapt_backtrace_flip(&e).unwrap();
        // forecasting on `rev` from the flipped window: flipped input is rev[6..10]
        let start = 16 - 10;
        assert_eq!(a.tokens, obs(&rev[start..start + 4]));
        let raw = rev[start + 4..start + 6].to_vec();
        assert_eq!(a.map_predictions(&raw).unwrap(), e.target);
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(v in prop::collection::vec(-1e6f64..1e6, 0..40)) {
            let t = obs(&v);
            prop_assert_eq!(flip(&flip(&t)), t);
        }

        #[test]
        fn impute_branch_follows_midpoint(
            l in 4usize..40,
            picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
        ) {
            let mut masked: Vec<usize> = picks.iter().map(|i| i.index(l)).collect();
            masked.sort_unstable();
            masked.dedup();
            let (first, last) = (masked[0], *masked.last().unwrap());
            let e = impute(l, &masked);
            match adapt_impute_truncate(&e, 0, 1) {
                Err(_) => prop_assert!(first == 0 && last == l - 1),
                Ok(a) => {
                    let prefix = 2 * first + (last - first) >= l;
                    let values: Vec<f64> = a.tokens.iter().map(|t| t.value).collect();
                    if prefix {
                        prop_assert_eq!(values, (0..first).map(|i| i as f64).collect::<Vec<_>>());
                    } else {
                        prop_assert_eq!(values, (last + 1..l).rev().map(|i| i as f64).collect::<Vec<_>>());
                    }
                    // an oracle forecaster that emits the true hull values in its own time order
                    let raw: Vec<f64> = (0..a.horizon)
                        .map(|k| if prefix { (first + k) as f64 } else { last as f64 - k as f64 })
                        .collect();
                    prop_assert_eq!(a.map_predictions(&raw).unwrap(), e.target.clone());
                }
            }
        }
    }
}
