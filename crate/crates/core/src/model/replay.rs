//! Checks that the dialogue depends on the input only through the
//! compression tokens.
//!
//! The check replays the sequence with every INPUT position removed. At each
//! layer the compression rows are pinned to the hidden states the full run
//! produced for them, so the replay sees exactly the compression keys and
//! values of the full run and nothing from INPUT. If the QA logits agree,
//! nothing else could have leaked.

use std::fmt;

use super::{forward, BoundParams, ForwardOptions, GradPolicy, Injection, ModelConfig, ModelParams, SegmentedSequence};
use crate::error::Result;
use crate::mask::AttentionMask;
use crate::tensor::{Real, Tape, Tensor};

/// Largest QA logit drift between the full and the replayed run.
pub const LOGIT_TOLERANCE: f64 = 1e-5;
/// Largest attention mass a QA row may put on any INPUT column.
pub const MASS_TOLERANCE: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    /// A QA row put attention mass on INPUT columns.
    InputAttention { layer: usize, head: usize, row: usize, mass: f64 },
    /// A QA row's logits changed once INPUT states were discarded.
    LogitDrift { row: usize, diff: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InputAttention { layer, head, row, mass } => {
                write!(f, "layer {layer} head {head} row {row}: attention mass {mass:e} on INPUT")
            }
            Self::LogitDrift { row, diff } => write!(f, "row {row}: replayed logits differ by {diff:e}"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct IndependenceReport {
    pub max_logit_diff: f64,
    pub max_input_mass: f64,
    pub violations: Vec<Violation>,
}

impl IndependenceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies that under `mask` the QA positions of `seq` are conditionally
/// independent of its INPUT positions given the compression states.
pub fn verify_conditional_independence<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    seq: &SegmentedSequence,
    mask: &AttentionMask,
) -> Result<IndependenceReport> {
    let layout = seq.layout()?;
    let n = layout.total();
    let tokens = &seq.tokens[..n];
    let mask = if mask.size() == n { mask.clone() } else { mask.select(&(0..n).collect::<Vec<_>>()) };
    let mut report = IndependenceReport::default();
    let qa = layout.qa_range();
    if qa.is_empty() {
        return Ok(report);
    }

    let mut tape = Tape::new();
    let b = BoundParams::bind(&mut tape, params, GradPolicy::None);
    let full = forward(&mut tape, &b, cfg, tokens, &mask, &ForwardOptions::default())?;

    for (l, heads) in full.attention.iter().enumerate() {
        for (h, &probs) in heads.iter().enumerate() {
            let p = tape.value(probs);
            for row in qa.clone() {
                let mass: f64 = p.row(row)[..layout.len_input].iter().map(|v| v.to_f64().unwrap()).sum();
                report.max_input_mass = report.max_input_mass.max(mass);
                if mass >= MASS_TOLERANCE {
                    report.violations.push(Violation::InputAttention { layer: l, head: h, row, mass });
                }
            }
        }
    }

    // Replay over COMPRESSION ∪ QA with original positions.
    let keep: Vec<usize> = (layout.len_input..n).collect();
    let comp_rows: Vec<usize> = (0..layout.len_comp).collect();
    let per_layer: Vec<Tensor<T>> = full.hidden[..cfg.n_layers]
        .iter()
        .map(|&h| gather(tape.value(h), layout.comp_range()))
        .collect();
    let injection = Injection { rows: comp_rows, per_layer };
    let sub_tokens: Vec<usize> = keep.iter().map(|&i| tokens[i]).collect();
    let sub_mask = mask.select(&keep);
    let opts = ForwardOptions {
        positions: Some(&keep),
        injection: Some(&injection),
        dropout_seed: None,
    };
    let replay = forward(&mut tape, &b, cfg, &sub_tokens, &sub_mask, &opts)?;

    let full_logits = tape.value(full.logits);
    let sub_logits = tape.value(replay.logits);
    for row in qa.clone() {
        let diff = full_logits
            .row(row)
            .iter()
            .zip(sub_logits.row(row - layout.len_input))
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max);
        report.max_logit_diff = report.max_logit_diff.max(diff);
        if diff >= LOGIT_TOLERANCE {
            report.violations.push(Violation::LogitDrift { row, diff });
        }
    }
    Ok(report)
}

fn gather<T: Real>(x: &Tensor<T>, rows: std::ops::Range<usize>) -> Tensor<T> {
    let d = x.cols();
    let n = rows.len();
    let data = rows.flat_map(|r| x.row(r).iter().copied()).collect();
    Tensor::new(vec![n, d], data).expect("row slice")
}
