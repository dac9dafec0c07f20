//! Contrastive fine-tuning with in-batch negatives.
//!
//! Large batches are handled with gradient caching: embed everything without
//! a graph, take the loss gradient with respect to the embedding matrix,
//! then re-encode chunk by chunk and push each chunk's slice of that
//! gradient through the encoder. Parameter gradients equal those of one
//! monolithic backward pass.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{RetrievalPair, Task};
use crate::error::{Error, Result};
use crate::eval::precision_at_1;
use crate::model::{embed, embed_batch_values, BoundParams, GradPolicy, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{write_log_line, LogLine};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Largest tolerated gap between a cached embedding and its re-encoding.
pub const CACHE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Effective batch size `B`.
    pub batch_size: usize,
    /// Sub-batch size for re-encoding with gradients.
    pub chunk_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub tasks: Vec<Task>,
    /// Evaluate held-out P@1 every this many steps; 0 disables.
    pub eval_every: usize,
    /// Images used for the training and held-out pair pools.
    pub train_images: usize,
    pub eval_images: usize,
    /// Held-out P@1 is scored within galleries of this many pairs and averaged.
    pub eval_batch_size: usize,
    #[serde(flatten)]
    pub optim: AdamWConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            batch_size: 256,
            chunk_size: 32,
            steps: 200,
            seed: 0,
            tasks: Task::ALL.to_vec(),
            eval_every: 50,
            train_images: 2048,
            eval_images: 64,
            eval_batch_size: 16,
            optim: AdamWConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: format!("contrastive.{field}"),
                msg: msg.into(),
            })
        };
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.chunk_size == 0 || self.chunk_size > self.batch_size {
            return bad("chunk_size", "must be in 1..=batch_size");
        }
        if self.eval_batch_size == 0 || self.eval_images % self.eval_batch_size != 0 {
            return bad("eval_batch_size", "must be positive and divide eval_images");
        }
        if self.tasks.is_empty() {
            return bad("tasks", "need at least one task");
        }
        self.optim.validate("contrastive")
    }
}

/// Unit-norm embeddings with item ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    pub ids: Vec<String>,
    pub vectors: Tensor<T>,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn new(ids: Vec<String>, vectors: Tensor<T>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(Error::invalid("embedding_set", "one row per id required"));
        }
        for r in 0..vectors.rows() {
            let n: f64 = vectors.row(r).iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::invalid("embedding_set", format!("row {r} has norm {n}")));
            }
        }
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// InfoNCE over rows of `q` and `d` on the tape: row `i` of `d` is the
/// positive of row `i` of `q`, every other row a negative.
pub fn info_nce_var<T: Real>(tape: &mut Tape<T>, q: Var, d: Var, tau: f64) -> Result<Var> {
    let sims = tape.matmul_bt(q, d)?;
    let n = tape.value(sims).rows();
    if tape.value(sims).cols() != n {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(d).shape().to_vec(),
        });
    }
    let logits = tape.scale(sims, T::lit(1.0 / tau));
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    Ok(tape.cross_entropy(logits, &targets)?.loss)
}

/// InfoNCE from a square similarity matrix, row `i` positive at column `i`.
pub fn info_nce_from_sims(sims: &Tensor<f64>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(sims.clone());
    let n = sims.rows();
    if sims.shape() != [n, n] {
        return Err(Error::invalid("info_nce", "similarity matrix must be square"));
    }
    let logits = tape.scale(s, 1.0 / tau);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let loss = tape.cross_entropy(logits, &targets)?.loss;
    Ok(tape.value(loss).item())
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicatePositive(id.clone()));
        }
    }
    Ok(())
}

pub fn info_nce<T: Real>(q: &EmbeddingSet<T>, d: &EmbeddingSet<T>, tau: f64) -> Result<f64> {
    check_unique(&d.ids)?;
    let mut tape = Tape::new();
    let qv = tape.constant(q.vectors.clone());
    let dv = tape.constant(d.vectors.clone());
    let loss = info_nce_var(&mut tape, qv, dv, tau)?;
    Ok(tape.value(loss).item().to_f64().unwrap())
}

/// Loss and parameter gradients of one contrastive batch.
pub struct ContrastiveGrads<T> {
    pub loss: f64,
    pub grads: Vec<Option<Vec<T>>>,
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], g: &crate::tensor::Gradients<T>, vars: &[Var]) {
    for (slot, &v) in grads.iter_mut().zip(vars) {
        if let Some(gv) = g.get(v) {
            match slot {
                Some(acc) => acc.iter_mut().zip(gv).for_each(|(a, x)| *a = *a + *x),
                None => *slot = Some(gv.to_vec()),
            }
        }
    }
}

/// Reference path: one graph over the whole batch.
pub fn monolithic_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    queries: &[Vec<usize>],
    docs: &[Vec<usize>],
    ids: &[String],
    tau: f64,
) -> Result<ContrastiveGrads<T>> {
    check_unique(ids)?;
    let mut tape = Tape::new();
    let b = BoundParams::bind(&mut tape, params, GradPolicy::Trainable);
    let q: Vec<Var> = queries.iter().map(|p| embed(&mut tape, &b, cfg, p)).collect::<Result<_>>()?;
    let d: Vec<Var> = docs.iter().map(|p| embed(&mut tape, &b, cfg, p)).collect::<Result<_>>()?;
    let q = tape.concat_rows(&q)?;
    let d = tape.concat_rows(&d)?;
    let loss = info_nce_var(&mut tape, q, d, tau)?;
    let g = tape.backward(loss)?;
    let mut grads = vec![None; params.len()];
    accumulate(&mut grads, &g, b.vars());
    Ok(ContrastiveGrads {
        loss: tape.value(loss).item().to_f64().unwrap(),
        grads,
    })
}

/// Gradient-cached path with re-encoding chunks of `chunk` payloads.
pub fn grad_cached_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    queries: &[Vec<usize>],
    docs: &[Vec<usize>],
    ids: &[String],
    tau: f64,
    chunk: usize,
) -> Result<ContrastiveGrads<T>> {
    check_unique(ids)?;
    if queries.len() != docs.len() || ids.len() != queries.len() {
        return Err(Error::invalid("grad_cache", "queries, docs and ids must align"));
    }
    if chunk == 0 {
        return Err(Error::invalid("grad_cache", "chunk size must be positive"));
    }
    // Pass 1: embeddings without a graph.
    let payloads: Vec<Vec<usize>> = queries.iter().chain(docs).cloned().collect();
    let cached = embed_batch_values(params, cfg, &payloads)?;
    let n = queries.len();
    let d = cfg.d_model;

    // Pass 2: loss and its gradient with respect to the embeddings.
    let mut tape = Tape::new();
    let all = tape.leaf(cached.clone(), true);
    let q = tape.slice_rows(all, 0, n)?;
    let dv = tape.slice_rows(all, n, n)?;
    let loss = info_nce_var(&mut tape, q, dv, tau)?;
    let emb_grad = tape.backward(loss)?.take(all).expect("embeddings are a gradient leaf");
    let loss = tape.value(loss).item().to_f64().unwrap();

    // Pass 3: re-encode each chunk with a graph and backpropagate its slice.
    let mut grads = vec![None; params.len()];
    for start in (0..payloads.len()).step_by(chunk) {
        let end = (start + chunk).min(payloads.len());
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, params, GradPolicy::Trainable);
        let rows: Vec<Var> = payloads[start..end].iter().map(|p| embed(&mut tape, &b, cfg, p)).collect::<Result<_>>()?;
        let e = tape.concat_rows(&rows)?;
        for (k, row) in (start..end).enumerate() {
            let diff = tape
                .value(e)
                .row(k)
                .iter()
                .zip(cached.row(row))
                .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
                .fold(0.0, f64::max);
            if diff > CACHE_TOLERANCE {
                return Err(Error::CacheMismatch { index: row, diff });
            }
        }
        let seed = Tensor::new(vec![end - start, d], emb_grad[start * d..end * d].to_vec())?;
        let g = tape.backward_with_seed(e, &seed)?;
        accumulate(&mut grads, &g, b.vars());
    }
    Ok(ContrastiveGrads { loss, grads })
}

/// One gradient-cached optimizer update on a batch of pairs.
pub fn grad_cached_step(
    params: &mut ModelParams<f32>,
    cfg: &ModelConfig,
    pairs: &[RetrievalPair],
    ccfg: &ContrastiveConfig,
    opt: &mut AdamW,
    step: usize,
) -> Result<f64> {
    let queries: Vec<Vec<usize>> = pairs.iter().map(|p| p.query.clone()).collect();
    let docs: Vec<Vec<usize>> = pairs.iter().map(|p| p.positive.clone()).collect();
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let out = grad_cached_grads(params, cfg, &queries, &docs, &ids, ccfg.temperature, ccfg.chunk_size)?;
    if !out.loss.is_finite() {
        return Err(Error::Diverged { step, value: out.loss });
    }
    opt.step(params, &out.grads)?;
    Ok(out.loss)
}

/// Held-out P@1 of one task: each query ranked against the positives of its
/// gallery of `gallery` consecutive pairs, averaged over galleries.
pub fn task_p_at_1<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, pairs: &[RetrievalPair], gallery: usize) -> Result<f64> {
    if gallery == 0 || pairs.is_empty() || pairs.len() % gallery != 0 {
        return Err(Error::invalid("task_p_at_1", "pairs must split into whole galleries"));
    }
    let mut hits = 0.0;
    for g in pairs.chunks(gallery) {
        let q: Vec<Vec<usize>> = g.iter().map(|p| p.query.clone()).collect();
        let d: Vec<Vec<usize>> = g.iter().map(|p| p.positive.clone()).collect();
        let ids: Vec<String> = g.iter().map(|p| p.id.clone()).collect();
        let qs = EmbeddingSet::new(ids.clone(), embed_batch_values(params, cfg, &q)?)?;
        let ds = EmbeddingSet::new(ids.clone(), embed_batch_values(params, cfg, &d)?)?;
        hits += precision_at_1(&qs, &ds, &ids)? * g.len() as f64;
    }
    Ok(hits / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub step: usize,
    pub task: Task,
    pub p_at_1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ContrastiveReport {
    pub losses: Vec<f64>,
    pub evals: Vec<EvalLine>,
}

/// Interleaves the configured tasks, one batch per step, cycling through
/// each task's batches in order.
pub fn train_contrastive(
    params: &mut ModelParams<f32>,
    cfg: &ModelConfig,
    train: &BTreeMap<Task, Vec<RetrievalPair>>,
    held_out: &BTreeMap<Task, Vec<RetrievalPair>>,
    ccfg: &ContrastiveConfig,
    log: &mut dyn Write,
) -> Result<ContrastiveReport> {
    ccfg.validate()?;
    for t in &ccfg.tasks {
        let n = train.get(t).map_or(0, Vec::len);
        if n < ccfg.batch_size {
            return Err(Error::Data(format!("task {} has {n} pairs, fewer than one batch", t.name())));
        }
    }
    let mut opt = AdamW::new(ccfg.optim.clone());
    let mut cursor: BTreeMap<Task, usize> = BTreeMap::new();
    let mut report = ContrastiveReport::default();
    let mut tokens_seen = 0;
    for step in 1..=ccfg.steps {
        let task = ccfg.tasks[(step - 1) % ccfg.tasks.len()];
        let pool = &train[&task];
        let batches = pool.len() / ccfg.batch_size;
        let c = cursor.entry(task).or_insert(0);
        let start = (*c % batches) * ccfg.batch_size;
        *c += 1;
        let batch = &pool[start..start + ccfg.batch_size];
        tokens_seen += batch.iter().map(|p| p.query.len() + p.positive.len()).sum::<usize>();
        let loss = grad_cached_step(params, cfg, batch, ccfg, &mut opt, step)?;
        write_log_line(log, &LogLine { step, loss, lr: ccfg.optim.lr, tokens_seen })?;
        report.losses.push(loss);
        if ccfg.eval_every > 0 && (step % ccfg.eval_every == 0 || step == ccfg.steps) {
            for (&task, pairs) in held_out {
                let p_at_1 = task_p_at_1(params, cfg, pairs, ccfg.eval_batch_size)?;
                let line = EvalLine { step, task, p_at_1 };
                write_log_line(log, &line)?;
                report.evals.push(line);
            }
        }
    }
    Ok(report)
}
