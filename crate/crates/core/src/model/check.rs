use super::{forward, BoundParams, ForwardOptions, ModelConfig, ModelParams, SegmentedSequence};
use crate::error::Result;
use crate::mask::build_compression_mask;
use crate::tensor::{grad_check, GradCheckReport};

/// Finite-difference check of the answer loss gradient with respect to every
/// weight tensor. Returns `(name, report)` per tensor.
pub fn model_grad_check(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    seq: &SegmentedSequence,
    eps: f64,
    tol: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mask = build_compression_mask(&seq.layout()?);
    let targets = seq.targets();
    let mut reports = Vec::with_capacity(params.len());
    for (i, p) in params.params().iter().enumerate() {
        let report = grad_check(
            |tape, leaf| {
                let b = BoundParams::bind_replacing(tape, params, i, leaf);
                let out = forward(tape, &b, cfg, &seq.tokens, &mask, &ForwardOptions::default())?;
                Ok(tape.cross_entropy(out.logits, &targets)?.loss)
            },
            &p.value,
            eps,
            tol,
        )?;
        reports.push((p.name.clone(), report));
    }
    Ok(reports)
}
