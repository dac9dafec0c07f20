//! Miniature decoder-only transformer with learnable compression tokens.
//!
//! Token ids share one space: text ids `[0, vocab_text)`, patch ids
//! `[vocab_text, vocab_text + vocab_patch)` and compression ids after that.
//! The output head predicts text tokens only.

mod check;
mod checkpoint;
mod forward;
mod lora;
mod replay;

pub use check::model_grad_check;
pub use checkpoint::{ensure_checkpoint_matches, load_checkpoint, read_checkpoint_config, save_checkpoint};
pub use forward::{compression_states, embed, embed_batch_values, forward, BoundParams, ForwardOptions, ForwardOutput, GradPolicy, Injection};
pub use lora::{lora_merge, lora_restart, LORA_TARGETS};
pub use replay::{verify_conditional_independence, IndependenceReport, Violation};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegmentLayout;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_text: usize,
    pub vocab_patch: usize,
    pub n_comp_tokens: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            vocab_text: crate::data::TEXT_VOCAB_SIZE,
            vocab_patch: crate::data::PATCH_VOCAB_SIZE,
            n_comp_tokens: 32,
            max_seq_len: 256,
            rope_base: 10_000.0,
            lora_rank: 16,
            lora_alpha: 32.0,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: format!("model.{field}"),
                msg: msg.into(),
            })
        };
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads", "d_model must be a positive multiple of n_heads");
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("n_heads", "head width must be even for rotary positions");
        }
        if self.n_comp_tokens == 0 {
            return bad("n_comp_tokens", "need at least one compression token");
        }
        if self.vocab_text == 0 {
            return bad("vocab_text", "text vocabulary is empty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if self.lora_rank > 0 && self.lora_alpha <= 0.0 {
            return bad("lora_alpha", "must be positive when lora_rank > 0");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len", "must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Rows of the shared text+patch embedding table.
    pub fn table_size(&self) -> usize {
        self.vocab_text + self.vocab_patch
    }

    /// Size of the full input id space, compression ids included.
    pub fn input_vocab(&self) -> usize {
        self.table_size() + self.n_comp_tokens
    }

    pub fn patch_id(&self, patch: usize) -> usize {
        self.vocab_text + patch
    }

    pub fn comp_id(&self, k: usize) -> usize {
        self.table_size() + k
    }

    pub fn comp_ids(&self) -> Vec<usize> {
        (0..self.n_comp_tokens).map(|k| self.comp_id(k)).collect()
    }

    pub fn lora_scale(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Input,
    Compression,
    Question,
    Answer,
    Pad,
}

/// One packed training or inference sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedSequence {
    pub id: String,
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
    /// True on ANSWER positions whose token is a prediction target.
    pub loss_mask: Vec<bool>,
}

impl SegmentedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.segments.len() || self.tokens.len() != self.loss_mask.len() {
            return Err(Error::invalid("segmented_sequence", "field lengths disagree"));
        }
        // INPUT* COMPRESSION* (QUESTION+ ANSWER+)* PAD*
        let mut stage = 0u8;
        for (i, s) in self.segments.iter().enumerate() {
            let next = match (stage, s) {
                (0, Segment::Input) => 0,
                (0 | 1, Segment::Compression) => 1,
                (1 | 3, Segment::Question) => 2,
                (2, Segment::Question) => 2,
                (2 | 3, Segment::Answer) => 3,
                (1 | 3 | 4, Segment::Pad) => 4,
                (0, Segment::Pad) => 4,
                _ => {
                    return Err(Error::invalid(
                        "segmented_sequence",
                        format!("segment {s:?} out of order at position {i}"),
                    ))
                }
            };
            stage = next;
            if self.loss_mask[i] && *s != Segment::Answer {
                return Err(Error::invalid(
                    "segmented_sequence",
                    format!("loss mask set on {s:?} position {i}"),
                ));
            }
        }
        if stage == 2 {
            return Err(Error::invalid("segmented_sequence", "question without answer"));
        }
        Ok(())
    }

    pub fn count(&self, seg: Segment) -> usize {
        self.segments.iter().filter(|s| **s == seg).count()
    }

    /// Segment layout of the non-padding prefix.
    pub fn layout(&self) -> Result<SegmentLayout> {
        let input = self.count(Segment::Input);
        let comp = self.count(Segment::Compression);
        let qa = self.count(Segment::Question) + self.count(Segment::Answer);
        SegmentLayout::new(input, comp, qa)
    }

    /// Next-token targets: row `p-1` predicts token `p` for every loss
    /// position `p`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.len()];
        for p in 1..self.len() {
            if self.loss_mask[p] {
                t[p - 1] = Some(self.tokens[p]);
            }
        }
        t
    }
}

/// A named weight plus whether the optimizer may touch it.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// All learned weights, in a fixed declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Names of the weights the pretraining stage updates by default: adapters,
/// compression embeddings and the output head.
pub fn default_trainable(name: &str) -> bool {
    name.contains(".lora_") || name == "embed.comp" || name == "head"
}

impl<T: Real> ModelParams<T> {
    pub fn from_params(params: Vec<Param<T>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self { params, index }
    }

    /// Random initialization, deterministic in `cfg.init_seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = cfg.d_model;
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor<T>| {
            let trainable = default_trainable(&name);
            params.push(Param {
                name,
                value,
                trainable,
            });
        };
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("valid std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect())
                .expect("shape")
        };
        push("embed.tokens".into(), normal(&[cfg.table_size(), d], 1.0, &mut rng));
        push("embed.comp".into(), normal(&[cfg.n_comp_tokens, d], 1.0, &mut rng));
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            push(format!("{p}.attn_norm.gain"), Tensor::full(&[d], T::one()));
            push(format!("{p}.attn_norm.bias"), Tensor::zeros(&[d]));
            for (proj, (din, dout)) in linear_shapes(cfg).into_iter().take(4) {
                push(format!("{p}.{proj}"), normal(&[din, dout], 1.0 / (din as f64).sqrt(), &mut rng));
            }
            push(format!("{p}.mlp_norm.gain"), Tensor::full(&[d], T::one()));
            push(format!("{p}.mlp_norm.bias"), Tensor::zeros(&[d]));
            for (proj, (din, dout)) in linear_shapes(cfg).into_iter().skip(4) {
                push(format!("{p}.{proj}"), normal(&[din, dout], 1.0 / (din as f64).sqrt(), &mut rng));
            }
            if cfg.lora_rank > 0 {
                for (proj, (din, dout)) in linear_shapes(cfg) {
                    let r = cfg.lora_rank;
                    push(
                        format!("{p}.{proj}.lora_a"),
                        normal(&[din, r], 1.0 / (din as f64).sqrt(), &mut rng),
                    );
                    push(format!("{p}.{proj}.lora_b"), Tensor::zeros(&[r, dout]));
                }
            }
        }
        push("final_norm.gain".into(), Tensor::full(&[d], T::one()));
        push("final_norm.bias".into(), Tensor::zeros(&[d]));
        push("head".into(), Tensor::zeros(&[d, cfg.vocab_text]));
        Ok(Self::from_params(params))
    }

    /// Expected `(name, shape)` list for `cfg`, in declaration order.
    pub fn expected_shapes(cfg: &ModelConfig, with_lora: bool) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        let mut out = vec![
            ("embed.tokens".to_string(), vec![cfg.table_size(), d]),
            ("embed.comp".to_string(), vec![cfg.n_comp_tokens, d]),
        ];
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm.gain"), vec![d]));
            out.push((format!("{p}.attn_norm.bias"), vec![d]));
            for (proj, (din, dout)) in linear_shapes(cfg).into_iter().take(4) {
                out.push((format!("{p}.{proj}"), vec![din, dout]));
            }
            out.push((format!("{p}.mlp_norm.gain"), vec![d]));
            out.push((format!("{p}.mlp_norm.bias"), vec![d]));
            for (proj, (din, dout)) in linear_shapes(cfg).into_iter().skip(4) {
                out.push((format!("{p}.{proj}"), vec![din, dout]));
            }
            if with_lora && cfg.lora_rank > 0 {
                for (proj, (din, dout)) in linear_shapes(cfg) {
                    out.push((format!("{p}.{proj}.lora_a"), vec![din, cfg.lora_rank]));
                    out.push((format!("{p}.{proj}.lora_b"), vec![cfg.lora_rank, dout]));
                }
            }
        }
        out.push(("final_norm.gain".into(), vec![d]));
        out.push(("final_norm.bias".into(), vec![d]));
        out.push(("head".into(), vec![d, cfg.vocab_text]));
        out
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn has_adapters(&self) -> bool {
        self.params.iter().any(|p| p.name.contains(".lora_"))
    }

    pub fn set_trainable(&mut self, f: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = f(&p.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams::from_params(
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        )
    }

    /// Checks every expected weight is present with the right shape and
    /// nothing unexpected is.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let with_lora = self.has_adapters();
        if with_lora && cfg.lora_rank == 0 {
            return Err(Error::Config {
                field: "model.lora_rank".into(),
                msg: "adapters present but lora_rank is 0".into(),
            });
        }
        let expected = Self::expected_shapes(cfg, with_lora);
        for (name, shape) in &expected {
            match self.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::NamedShape {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: shape.clone(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = self
            .params
            .iter()
            .find(|p| !expected.iter().any(|(n, _)| *n == p.name))
        {
            return Err(Error::Checkpoint(format!("unknown tensor `{}`", extra.name)));
        }
        Ok(())
    }
}

/// `(projection name, (d_in, d_out))` for every adapted linear map of a block.
fn linear_shapes(cfg: &ModelConfig) -> Vec<(&'static str, (usize, usize))> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    vec![
        ("attn.q", (d, d)),
        ("attn.k", (d, d)),
        ("attn.v", (d, d)),
        ("attn.o", (d, d)),
        ("mlp.up", (d, f)),
        ("mlp.down", (f, d)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_text: 10,
            vocab_patch: 4,
            n_comp_tokens: 3,
            max_seq_len: 32,
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_matches_expected_layout() {
        let cfg = tiny();
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        p.check_against(&cfg).unwrap();
        assert_eq!(p.get("embed.comp").unwrap().shape(), &[3, 8]);
        for param in p.params() {
            if param.name.ends_with("lora_b") {
                assert!(param.value.data().iter().all(|x| *x == 0.0));
            }
        }
        assert!(p.get("head").unwrap().data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny();
        assert_eq!(ModelParams::<f32>::init(&cfg).unwrap(), ModelParams::<f32>::init(&cfg).unwrap());
        let other = ModelConfig { init_seed: 1, ..tiny() };
        assert_ne!(ModelParams::<f32>::init(&cfg).unwrap(), ModelParams::<f32>::init(&other).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { n_comp_tokens: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn sequence_order_and_loss_mask_checks() {
        use Segment::*;
        let seq = SegmentedSequence {
            id: "a".into(),
            tokens: vec![10, 11, 14, 1, 2, 3, 4],
            segments: vec![Input, Input, Compression, Question, Answer, Question, Answer],
            loss_mask: vec![false, false, false, false, true, false, true],
        };
        seq.validate().unwrap();
        assert_eq!(seq.targets(), vec![None, None, None, Some(2), None, Some(4), None]);
        let mut bad = seq.clone();
        bad.loss_mask[3] = true;
        assert!(bad.validate().is_err());
        let mut bad = seq.clone();
        bad.segments.swap(0, 2);
        assert!(bad.validate().is_err());
    }
}
