//! End-to-end runs: corpus → pretraining → contrastive tuning → evaluation,
//! plus the compression-token-count sweep.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{task_p_at_1, train_contrastive, ContrastiveConfig, ContrastiveReport};
use crate::data::{
    gen_corpus, gen_images, gen_retrieval_pairs, DataConfig, Format, GridConfig, RetrievalPair, Task, PATCH_VOCAB_SIZE, TEXT_VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::eval::{token_similarity_matrix, TaskScore};
use crate::model::{model_grad_check, ModelConfig, ModelParams};
use crate::pretrain::{record_sequence, train_pretrain, PretrainConfig};
use crate::tensor::{GradCheckReport, Tensor, SUITE_EPS};

/// Every knob of one experiment. Section seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

impl ExperimentConfig {
    /// Overwrites every section seed with one derived from the master seed.
    pub fn derive_seeds(&mut self) {
        let s = self.seed;
        self.model.init_seed = s;
        self.data.seed = s.wrapping_add(1);
        self.pretrain.seed = s.wrapping_add(2);
        self.contrastive.seed = s.wrapping_add(3);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.derive_seeds();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.grid.validate()?;
        self.pretrain.validate()?;
        self.contrastive.validate()?;
        if self.model.vocab_text != TEXT_VOCAB_SIZE {
            return Err(Error::Config {
                field: "model.vocab_text".into(),
                msg: format!("must equal the text vocabulary size {TEXT_VOCAB_SIZE}"),
            });
        }
        if self.model.vocab_patch != PATCH_VOCAB_SIZE {
            return Err(Error::Config {
                field: "model.vocab_patch".into(),
                msg: format!("must equal the patch vocabulary size {PATCH_VOCAB_SIZE}"),
            });
        }
        Ok(())
    }
}

/// Training and held-out retrieval pairs per task.
pub struct RetrievalSets {
    pub train: BTreeMap<Task, Vec<RetrievalPair>>,
    pub held_out: BTreeMap<Task, Vec<RetrievalPair>>,
}

/// Grid for the class task: about one object per image, so that whole
/// batches of images with a distinctive attribute exist.
pub fn class_grid(grid: &GridConfig) -> GridConfig {
    let cells = (grid.grid_size * grid.grid_size) as f64;
    GridConfig { grid_size: grid.grid_size, occupancy: grid.occupancy.min(1.0 / cells) }
}

fn task_grid(cfg: &ExperimentConfig, task: Task) -> GridConfig {
    if task == Task::Class {
        class_grid(&cfg.data.grid)
    } else {
        cfg.data.grid.clone()
    }
}

/// Training pairs for every configured task, in batches of `batch_size`.
pub fn train_sets(cfg: &ExperimentConfig) -> Result<BTreeMap<Task, Vec<RetrievalPair>>> {
    let c = &cfg.contrastive;
    c.tasks
        .iter()
        .map(|&task| {
            let imgs = gen_images(c.seed, c.train_images, &task_grid(cfg, task), "t");
            Ok((task, gen_retrieval_pairs(&imgs, task, c.batch_size, c.seed)?))
        })
        .collect()
}

/// Held-out pairs for every configured task: `eval_images` pairs in
/// galleries of `eval_batch_size`, from images the training pool never uses.
pub fn held_out_sets(cfg: &ExperimentConfig) -> Result<BTreeMap<Task, Vec<RetrievalPair>>> {
    let c = &cfg.contrastive;
    let seed = c.seed ^ 0x5eed_e7a1;
    c.tasks
        .iter()
        .map(|&task| {
            let imgs = gen_images(seed, 2 * c.eval_images, &task_grid(cfg, task), "e");
            let mut pairs = gen_retrieval_pairs(&imgs, task, c.eval_batch_size, seed)?;
            if pairs.len() < c.eval_images {
                return Err(Error::Data(format!(
                    "only {} held-out {} pairs, need {}",
                    pairs.len(),
                    task.name(),
                    c.eval_images
                )));
            }
            pairs.truncate(c.eval_images);
            Ok((task, pairs))
        })
        .collect()
}

pub fn retrieval_sets(cfg: &ExperimentConfig) -> Result<RetrievalSets> {
    Ok(RetrievalSets {
        train: train_sets(cfg)?,
        held_out: held_out_sets(cfg)?,
    })
}

/// Image payloads for the compression-token similarity statistic, disjoint
/// in seed from training and held-out images.
pub fn similarity_payloads(cfg: &ExperimentConfig, n: usize) -> Vec<Vec<usize>> {
    gen_images(cfg.contrastive.seed ^ 0xa11_5a3e, n, &cfg.data.grid, "s")
        .into_iter()
        .map(|(_, img)| img.payload())
        .collect()
}

/// Fresh weights plus compression pretraining on the configured corpus.
pub fn pretrained_params(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<(ModelParams<f32>, Vec<f64>)> {
    let mut params = ModelParams::init(&cfg.model)?;
    let corpus = gen_corpus(&cfg.data)?;
    let losses = train_pretrain(&mut params, &cfg.model, &corpus, &cfg.pretrain, log, None)?;
    Ok((params, losses))
}

pub fn evaluate(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    held_out: &BTreeMap<Task, Vec<RetrievalPair>>,
    gallery: usize,
) -> Result<Vec<TaskScore>> {
    held_out
        .iter()
        .map(|(&task, pairs)| {
            Ok(TaskScore {
                task,
                p_at_1: task_p_at_1(params, model, pairs, gallery)?,
                size: pairs.len(),
            })
        })
        .collect()
}

/// Contrastive tuning from `params`, then held-out scores.
pub fn contrast_and_evaluate(
    mut params: ModelParams<f32>,
    cfg: &ExperimentConfig,
    sets: &RetrievalSets,
    log: &mut dyn Write,
) -> Result<(ModelParams<f32>, ContrastiveReport, Vec<TaskScore>)> {
    let report = train_contrastive(&mut params, &cfg.model, &sets.train, &sets.held_out, &cfg.contrastive, log)?;
    let scores = evaluate(&params, &cfg.model, &sets.held_out, cfg.contrastive.eval_batch_size)?;
    Ok((params, report, scores))
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    /// `None` for the contrastive-only baseline.
    pub k: Option<usize>,
    pub scores: Vec<TaskScore>,
    /// Mean pairwise cosine of the compression states after pretraining.
    pub similarity: Option<Tensor<f64>>,
}

/// Number of held-out image payloads the similarity statistic averages.
pub const SIMILARITY_SAMPLES: usize = 100;

/// Pretrains and tunes one model per `k`, plus a contrastive-only baseline
/// with the base config's K, all under the same data, seed and budget.
pub fn ablate_k(base: &ExperimentConfig, k_values: &[usize]) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let sets = retrieval_sets(base)?;
    let sample = similarity_payloads(base, SIMILARITY_SAMPLES);
    let mut rows = Vec::with_capacity(k_values.len() + 1);
    for &k in k_values {
        let mut cfg = base.clone();
        cfg.model.n_comp_tokens = k;
        cfg.model.max_seq_len = cfg.model.max_seq_len.max(base.model.max_seq_len - base.model.n_comp_tokens + k);
        cfg.validate()?;
        let (params, _) = pretrained_params(&cfg, &mut std::io::sink())?;
        let similarity = token_similarity_matrix(&params, &cfg.model, &sample)?;
        let (_, _, scores) = contrast_and_evaluate(params, &cfg, &sets, &mut std::io::sink())?;
        rows.push(AblationRow { k: Some(k), scores, similarity: Some(similarity) });
    }
    let params = ModelParams::init(&base.model)?;
    let (_, _, scores) = contrast_and_evaluate(params, base, &sets, &mut std::io::sink())?;
    rows.push(AblationRow { k: None, scores, similarity: None });
    Ok(rows)
}

/// `k,task,p_at_1` lines; the baseline row has `k = baseline`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,task,p_at_1\n");
    for r in rows {
        let k = r.k.map_or("baseline".to_string(), |k| k.to_string());
        for s in &r.scores {
            out.push_str(&format!("{k},{},{}\n", s.task.name(), s.p_at_1));
        }
    }
    out
}

/// Finite-difference check of every weight tensor of a small 2-layer model
/// on one generated record, in f64. Adapters and head are randomized so no
/// gradient is trivially zero.
pub fn full_model_grad_check(seed: u64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        n_comp_tokens: 3,
        max_seq_len: 64,
        lora_rank: 2,
        lora_alpha: 4.0,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let data = DataConfig {
        seed,
        count: 1,
        format: Format::SingleTurn,
        grid: GridConfig { grid_size: 2, occupancy: 0.5 },
    };
    let record = gen_corpus(&data)?.remove(0);
    let seq = record_sequence(&record, &cfg)?;
    let mut params = ModelParams::<f64>::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..params.len() {
        let p = params.param_mut(i);
        if p.name.ends_with(".lora_b") || p.name == "head" {
            p.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
    }
    model_grad_check(&params, &cfg, &seq, SUITE_EPS, tol)
}
