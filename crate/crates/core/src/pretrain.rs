//! Compression pretraining: answer-token prediction through the compression
//! mask, or distillation from an unmasked teacher.
//!
//! Every record is packed as `INPUT ⊕ COMPRESSION ⊕ Q₁ A₁ … Q_T A_T`. Only
//! answer tokens are prediction targets; questions are context.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_text, Record, PAD};
use crate::error::{Error, Result};
use crate::mask::{build_compression_mask, AttentionMask};
use crate::model::{
    forward, save_checkpoint, BoundParams, ForwardOptions, GradPolicy, ModelConfig, ModelParams, Segment,
    SegmentedSequence,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ntp,
    Kl,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ntp" => Some(Self::Ntp),
            "kl" => Some(Self::Kl),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    #[serde(flatten)]
    pub optim: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ntp,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            optim: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "pretrain.batch_size".into(),
                msg: "must be at least 1".into(),
            });
        }
        self.optim.validate("pretrain")
    }
}

/// Padded sequences plus their attention masks.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub sequences: Vec<SegmentedSequence>,
    pub masks: Vec<AttentionMask>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.sequences.iter().map(|s| s.loss_mask.iter().filter(|m| **m).count()).sum()
    }
}

/// Packs one record.
pub fn record_sequence(rec: &Record, cfg: &ModelConfig) -> Result<SegmentedSequence> {
    let reject = |msg: String| Error::RecordRejected {
        id: rec.id.clone(),
        msg,
    };
    let patches = rec.grid.patch_tokens();
    if patches.iter().any(|&p| p >= cfg.vocab_patch) {
        return Err(reject("patch vocabulary too small for this grid".into()));
    }
    let mut tokens: Vec<usize> = patches.into_iter().map(|p| cfg.patch_id(p)).collect();
    let mut segments = vec![Segment::Input; tokens.len()];
    tokens.extend(cfg.comp_ids());
    segments.resize(tokens.len(), Segment::Compression);
    if rec.turns.is_empty() {
        return Err(reject("no turns".into()));
    }
    for t in &rec.turns {
        let q = encode_text(&t.question).map_err(|e| reject(e.to_string()))?;
        let a = encode_text(&t.answer).map_err(|e| reject(e.to_string()))?;
        if q.is_empty() || a.is_empty() {
            return Err(reject("empty question or answer".into()));
        }
        if let Some(&id) = q.iter().chain(&a).find(|&&id| id >= cfg.vocab_text) {
            return Err(reject(format!("text id {id} outside vocab_text {}", cfg.vocab_text)));
        }
        segments.extend(std::iter::repeat_n(Segment::Question, q.len()));
        segments.extend(std::iter::repeat_n(Segment::Answer, a.len()));
        tokens.extend(q);
        tokens.extend(a);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(reject(format!("{} tokens exceed max_seq_len {}", tokens.len(), cfg.max_seq_len)));
    }
    let loss_mask = segments.iter().map(|s| *s == Segment::Answer).collect();
    let seq = SegmentedSequence {
        id: rec.id.clone(),
        tokens,
        segments,
        loss_mask,
    };
    seq.validate()?;
    Ok(seq)
}

/// Pads already-packed sequences to a common length.
pub fn pad_batch(seqs: Vec<SegmentedSequence>) -> Result<TrainBatch> {
    let max = seqs.iter().map(SegmentedSequence::len).max().unwrap_or(0);
    let mut masks = Vec::with_capacity(seqs.len());
    let mut sequences = Vec::with_capacity(seqs.len());
    for mut s in seqs {
        let extra = max - s.len();
        masks.push(build_compression_mask(&s.layout()?).padded(extra));
        s.tokens.resize(max, PAD);
        s.segments.resize(max, Segment::Pad);
        s.loss_mask.resize(max, false);
        sequences.push(s);
    }
    Ok(TrainBatch { sequences, masks })
}

pub fn build_pretrain_batch(records: &[Record], cfg: &ModelConfig) -> Result<TrainBatch> {
    if let Some(first) = records.first() {
        if let Some(r) = records.iter().find(|r| r.format != first.format) {
            return Err(Error::RecordRejected {
                id: r.id.clone(),
                msg: format!("format {} differs from batch format {}", r.format.name(), first.format.name()),
            });
        }
    }
    pad_batch(records.iter().map(|r| record_sequence(r, cfg)).collect::<Result<_>>()?)
}

/// Standard causal mask over the real tokens, padding isolated.
fn teacher_mask(seq: &SegmentedSequence) -> Result<AttentionMask> {
    let n = seq.layout()?.total();
    Ok(AttentionMask::causal(n).padded(seq.len() - n))
}

/// One answer-token loss value.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLoss {
    pub record: String,
    /// Position of the predicted token.
    pub position: usize,
    pub token: usize,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    /// Token-level mean over the whole batch.
    pub loss: f64,
    pub per_token: Vec<TokenLoss>,
    /// Parameter gradients of `loss`, one slot per parameter.
    pub grads: Vec<Option<Vec<T>>>,
}

/// Loss of one sequence under `mask`; returns the scalar per-record mean and
/// the per-token values, and accumulates `weight · ∂loss/∂θ` into `grads`.
#[allow(clippy::too_many_arguments)]
fn record_loss<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    seq: &SegmentedSequence,
    mask: &AttentionMask,
    kind: LossKind,
    teacher: Option<&AttentionMask>,
    weight: Option<f64>,
    grads: &mut [Option<Vec<T>>],
) -> Result<(f64, Vec<TokenLoss>)> {
    let targets = seq.targets();
    let mut tape = Tape::new();
    let policy = if weight.is_some() { GradPolicy::Trainable } else { GradPolicy::None };
    let b = BoundParams::bind(&mut tape, params, policy);
    let out = forward(&mut tape, &b, cfg, &seq.tokens, mask, &ForwardOptions::default())?;
    let loss = match kind {
        LossKind::Ntp => tape.cross_entropy(out.logits, &targets)?,
        LossKind::Kl => {
            let tmask = match teacher {
                Some(m) => m.clone(),
                None => teacher_mask(seq)?,
            };
            let mut ttape = Tape::new();
            let tb = BoundParams::bind(&mut ttape, params, GradPolicy::None);
            let tout = forward(&mut ttape, &tb, cfg, &seq.tokens, &tmask, &ForwardOptions::default())?;
            let rows: Vec<bool> = targets.iter().map(Option::is_some).collect();
            tape.kl_div(ttape.value(tout.logits), out.logits, &rows)?
        }
    };
    let value = tape.value(loss.loss).item().to_f64().unwrap();
    let per_token = loss
        .per_position
        .iter()
        .map(|&(row, v)| TokenLoss {
            record: seq.id.clone(),
            position: row + 1,
            token: seq.tokens[row + 1],
            value: v.to_f64().unwrap(),
        })
        .collect();
    if let Some(w) = weight {
        let g = tape.backward_with_seed(loss.loss, &Tensor::scalar(T::lit(w)))?;
        for (slot, &v) in grads.iter_mut().zip(b.vars()) {
            if let Some(gv) = g.get(v) {
                match slot {
                    Some(acc) => acc.iter_mut().zip(gv).for_each(|(a, x)| *a = *a + *x),
                    None => *slot = Some(gv.to_vec()),
                }
            }
        }
    }
    Ok((value, per_token))
}

/// Token-level mean loss over `batch`, with gradients when `with_grad`.
pub fn batch_loss<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    kind: LossKind,
    with_grad: bool,
) -> Result<BatchLoss<T>> {
    batch_loss_with_teacher(params, cfg, batch, kind, with_grad, None)
}

fn batch_loss_with_teacher<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    kind: LossKind,
    with_grad: bool,
    teacher: Option<&[AttentionMask]>,
) -> Result<BatchLoss<T>> {
    let total = batch.target_count();
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut grads = vec![None; params.len()];
    let mut per_token = Vec::with_capacity(total);
    let mut sum = 0.0;
    // Records in batch order, so gradient sums are reproducible.
    for (i, (seq, mask)) in batch.sequences.iter().zip(&batch.masks).enumerate() {
        let n = seq.loss_mask.iter().filter(|m| **m).count();
        if n == 0 {
            continue;
        }
        let weight = with_grad.then_some(n as f64 / total as f64);
        let t = teacher.map(|m| &m[i]);
        let (mean, tokens) = record_loss(params, cfg, seq, mask, kind, t, weight, &mut grads)?;
        sum += mean * n as f64;
        per_token.extend(tokens);
    }
    Ok(BatchLoss {
        loss: sum / total as f64,
        per_token,
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub per_token: Vec<TokenLoss>,
}

fn apply_step<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut AdamW,
    out: BatchLoss<T>,
    step: usize,
) -> Result<StepOutput> {
    if !out.loss.is_finite() {
        return Err(Error::Diverged { step, value: out.loss });
    }
    opt.step(params, &out.grads)?;
    Ok(StepOutput {
        loss: out.loss,
        per_token: out.per_token,
    })
}

/// One cross-entropy update.
pub fn ntp_step<T: Real>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    opt: &mut AdamW,
    step: usize,
) -> Result<StepOutput> {
    let out = batch_loss(params, cfg, batch, LossKind::Ntp, true)?;
    apply_step(params, opt, out, step)
}

/// One distillation update: KL(teacher ‖ student) where the teacher is the
/// same model with QA→INPUT attention allowed.
pub fn kl_step<T: Real>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    opt: &mut AdamW,
    step: usize,
) -> Result<StepOutput> {
    let out = batch_loss(params, cfg, batch, LossKind::Kl, true)?;
    apply_step(params, opt, out, step)
}

/// KL loss with an explicit teacher mask per sequence.
pub fn kl_loss_with_teacher<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    teacher: &[AttentionMask],
    with_grad: bool,
) -> Result<BatchLoss<T>> {
    batch_loss_with_teacher(params, cfg, batch, LossKind::Kl, with_grad, Some(teacher))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: usize,
}

pub fn write_log_line(log: &mut dyn Write, line: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string(line).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    log.write_all(s.as_bytes()).map_err(|e| Error::io("<log>", e))
}

/// Where and how often to save during training.
pub struct CheckpointSink<'a> {
    pub path: &'a Path,
    pub every: usize,
}

/// Trains on `records` for `cfg.steps` steps and returns the loss trajectory.
pub fn train_pretrain(
    params: &mut ModelParams<f32>,
    model: &ModelConfig,
    records: &[Record],
    cfg: &PretrainConfig,
    log: &mut dyn Write,
    sink: Option<CheckpointSink>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let seqs: Vec<SegmentedSequence> = records.iter().map(|r| record_sequence(r, model)).collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut tokens_seen = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(seqs.len()) {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(seqs[order.pop().unwrap()].clone());
        }
        let batch = pad_batch(picked)?;
        tokens_seen += batch.target_count();
        let out = match cfg.loss {
            LossKind::Ntp => ntp_step(params, model, &batch, &mut opt, step)?,
            LossKind::Kl => kl_step(params, model, &batch, &mut opt, step)?,
        };
        write_log_line(log, &LogLine { step, loss: out.loss, lr: cfg.optim.lr, tokens_seen })?;
        losses.push(out.loss);
        if let Some(s) = &sink {
            if (s.every > 0 && step % s.every == 0) || step == cfg.steps {
                save_checkpoint(params, model, s.path)?;
            }
        }
    }
    Ok(losses)
}

/// Mean answer loss of one sequence without gradients.
pub fn sequence_loss<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, seq: &SegmentedSequence, kind: LossKind) -> Result<f64> {
    let batch = pad_batch(vec![seq.clone()])?;
    Ok(batch_loss(params, cfg, &batch, kind, false)?.loss)
}

/// `seq` with every INPUT token replaced by a random patch token.
pub fn noised_input(seq: &SegmentedSequence, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SegmentedSequence {
    let mut out = seq.clone();
    for (t, s) in out.tokens.iter_mut().zip(&seq.segments) {
        if *s == Segment::Input {
            *t = cfg.patch_id(rng.random_range(0..cfg.vocab_patch));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, DataConfig, Family, Format, Turn};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            n_comp_tokens: 4,
            max_seq_len: 160,
            lora_rank: 4,
            lora_alpha: 8.0,
            ..ModelConfig::default()
        }
    }

    fn records(format: Format, n: usize) -> Vec<Record> {
        gen_corpus(&DataConfig { count: n, format, ..DataConfig::default() }).unwrap()
    }

    #[test]
    fn single_turn_loss_mask_counts_answer_tokens() {
        for r in records(Format::SingleTurn, 10) {
            let s = record_sequence(&r, &cfg()).unwrap();
            let answer = encode_text(&r.turns[0].answer).unwrap().len();
            assert_eq!(s.loss_mask.iter().filter(|m| **m).count(), answer);
        }
    }

    #[test]
    fn multi_turn_masks_every_answer_and_no_question() {
        for r in records(Format::MultiTurn, 10) {
            let s = record_sequence(&r, &cfg()).unwrap();
            let answers: usize = r.turns.iter().map(|t| encode_text(&t.answer).unwrap().len()).sum();
            let questions: usize = r.turns.iter().map(|t| encode_text(&t.question).unwrap().len()).sum();
            assert_eq!(s.count(Segment::Answer), answers);
            assert_eq!(s.count(Segment::Question), questions);
            assert_eq!(s.loss_mask.iter().filter(|m| **m).count(), answers);
            assert!(s.loss_mask.iter().zip(&s.segments).all(|(m, seg)| !m || *seg == Segment::Answer));
        }
    }

    #[test]
    fn rejects_empty_answer_and_overlong_records() {
        let mut r = records(Format::SingleTurn, 1).remove(0);
        r.turns = vec![Turn { family: Family::Count, question: "how many objects are there ?".into(), answer: String::new() }];
        assert!(matches!(record_sequence(&r, &cfg()), Err(Error::RecordRejected { ref id, .. }) if id == "000000"));
        let r = records(Format::Description, 1).remove(0);
        let short = ModelConfig { max_seq_len: 40, ..cfg() };
        assert!(matches!(build_pretrain_batch(&[r], &short), Err(Error::RecordRejected { .. })));
    }

    #[test]
    fn mixed_formats_are_rejected() {
        let mut rs = records(Format::SingleTurn, 2);
        rs[1].format = Format::MultiTurn;
        assert!(build_pretrain_batch(&rs, &cfg()).is_err());
    }

    #[test]
    fn untrained_loss_is_log_vocab() {
        let cfg = cfg();
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        let batch = build_pretrain_batch(&records(Format::MultiTurn, 4), &cfg).unwrap();
        let l = batch_loss(&p, &cfg, &batch, LossKind::Ntp, false).unwrap().loss;
        assert!((l - (cfg.vocab_text as f64).ln()).abs() < 1e-5, "{l}");
    }

    #[test]
    fn loss_is_invariant_to_padding() {
        let cfg = cfg();
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in p.get_mut("head").unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let rs = records(Format::MultiTurn, 1);
        let seq = record_sequence(&rs[0], &cfg).unwrap();
        let tight = pad_batch(vec![seq.clone()]).unwrap();
        let mut long = seq.clone();
        long.tokens.resize(seq.len() + 9, PAD);
        long.segments.resize(seq.len() + 9, Segment::Pad);
        long.loss_mask.resize(seq.len() + 9, false);
        let loose = TrainBatch {
            masks: vec![build_compression_mask(&seq.layout().unwrap()).padded(9)],
            sequences: vec![long],
        };
        for kind in [LossKind::Ntp, LossKind::Kl] {
            let a = batch_loss(&p, &cfg, &tight, kind, false).unwrap().loss;
            let b = batch_loss(&p, &cfg, &loose, kind, false).unwrap().loss;
            assert!((a - b).abs() < 1e-12, "{kind:?} {a} {b}");
        }
    }

    #[test]
    fn kl_with_student_mask_as_teacher_is_zero() {
        let cfg = cfg();
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in p.get_mut("head").unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let i = p.position("layers.0.attn.q.lora_b").unwrap();
        p.param_mut(i).value.data_mut()[0] = 0.3;
        let batch = build_pretrain_batch(&records(Format::MultiTurn, 2), &cfg).unwrap();
        let out = kl_loss_with_teacher(&p, &cfg, &batch, &batch.masks.clone(), true).unwrap();
        assert_eq!(out.loss, 0.0);
        for g in out.grads.iter().flatten() {
            assert!(g.iter().all(|x| *x == 0.0));
        }
        let real = batch_loss(&p, &cfg, &batch, LossKind::Kl, false).unwrap();
        assert!(real.loss > 0.0);
        assert!(real.per_token.iter().all(|t| t.value >= 0.0));
    }

    #[test]
    fn frozen_base_weights_never_change() {
        let cfg = cfg();
        let mut p = ModelParams::<f32>::init(&cfg).unwrap();
        let before = p.clone();
        let cfg_t = PretrainConfig { steps: 3, batch_size: 2, optim: AdamWConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
        train_pretrain(&mut p, &cfg, &records(Format::MultiTurn, 4), &cfg_t, &mut Vec::new(), None).unwrap();
        let mut changed = 0;
        for (a, b) in before.params().iter().zip(p.params()) {
            if a.trainable {
                changed += (a.value != b.value) as usize;
            } else {
                assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = cfg();
        let rs = records(Format::MultiTurn, 6);
        let tcfg = PretrainConfig { steps: 4, batch_size: 3, optim: AdamWConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
        let run = || {
            let mut p = ModelParams::<f32>::init(&cfg).unwrap();
            let mut log = Vec::new();
            let l = train_pretrain(&mut p, &cfg, &rs, &tcfg, &mut log, None).unwrap();
            (l, log, p)
        };
        let (a, la, pa) = run();
        let (b, lb, pb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        let first: LogLine = serde_json::from_slice(la.split(|c| *c == b'\n').next().unwrap()).unwrap();
        assert_eq!(first.step, 1);
    }

    #[test]
    fn input_gradient_flows_only_through_compression_rows() {
        // Make INPUT embeddings trainable; cut the compression rows' access
        // to INPUT and the INPUT gradient must vanish.
        let cfg = cfg();
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in p.get_mut("head").unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        p.set_trainable(|n| n == "embed.tokens");
        let seq = record_sequence(&records(Format::MultiTurn, 1)[0], &cfg).unwrap();
        let layout = seq.layout().unwrap();
        let input_ids: Vec<usize> = seq.tokens[..layout.len_input].to_vec();
        let grad_on_input = |mask: AttentionMask| {
            let batch = TrainBatch { sequences: vec![seq.clone()], masks: vec![mask] };
            let g = batch_loss(&p, &cfg, &batch, LossKind::Ntp, true).unwrap().grads;
            let g = g[p.position("embed.tokens").unwrap()].clone().unwrap();
            input_ids.iter().map(|&id| g[id * cfg.d_model..(id + 1) * cfg.d_model].iter().map(|x| x.abs()).sum::<f64>()).sum::<f64>()
        };
        let full = build_compression_mask(&layout);
        assert!(grad_on_input(full.clone()) > 1e-8);
        let comp = layout.comp_range();
        let cut = AttentionMask::from_fn(layout.total(), |r, c| {
            full.allows(r, c) && !(comp.contains(&r) && c < layout.len_input)
        });
        // INPUT-only ids that never appear outside the INPUT segment.
        assert!(input_ids.iter().all(|&id| id >= cfg.vocab_text));
        assert_eq!(grad_on_input(cut), 0.0);
    }
}
