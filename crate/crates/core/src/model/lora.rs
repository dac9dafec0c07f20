//! Low-rank adapters on every block projection.
//!
//! An adapted projection computes `x·W + (α/r)·(x·A)·B` with `A: d_in×r` and
//! `B: r×d_out`. `B` starts at zero, so a fresh adapter is an exact no-op.

use super::{ModelConfig, ModelParams, Param};
use crate::error::{Error, Result};
use crate::tensor::{matmul_plain, Real};

/// Projections that carry adapters, relative to `layers.{l}`.
pub const LORA_TARGETS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];

/// Folds `(α/r)·A·B` into each base weight and drops the adapters.
pub fn lora_merge<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    if !params.has_adapters() {
        return Err(Error::invalid("lora_merge", "no adapters present"));
    }
    if cfg.lora_rank == 0 {
        let nonzero = params
            .params()
            .iter()
            .any(|p| p.name.contains(".lora_") && p.value.data().iter().any(|v| *v != T::zero()));
        if nonzero {
            return Err(Error::invalid("lora_merge", "lora_rank is 0 but adapters are nonzero"));
        }
    }
    let scale = T::lit(cfg.lora_scale());
    let mut merged = Vec::with_capacity(params.len());
    for p in params.params() {
        if p.name.contains(".lora_") {
            continue;
        }
        let a = params.get(&format!("{}.lora_a", p.name));
        let b = params.get(&format!("{}.lora_b", p.name));
        let value = match (a, b) {
            (Some(a), Some(b)) => {
                let delta = matmul_plain(a, b)?;
                let mut w = p.value.clone();
                if w.shape() != delta.shape() {
                    return Err(Error::NamedShape {
                        name: p.name.clone(),
                        found: delta.shape().to_vec(),
                        expected: w.shape().to_vec(),
                    });
                }
                for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
                    *x = *x + scale * *d;
                }
                w
            }
            (None, None) => p.value.clone(),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "`{}` has only one half of its adapter pair",
                    p.name
                )))
            }
        };
        merged.push(Param {
            name: p.name.clone(),
            value,
            trainable: p.trainable,
        });
    }
    Ok(ModelParams::from_params(merged))
}

/// Merges the current adapters into the base weights and attaches fresh
/// adapters, identical to those `ModelParams::init(cfg)` would create.
pub fn lora_restart<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    let merged = lora_merge(params, cfg)?;
    let fresh = ModelParams::<T>::init(cfg)?;
    let out = fresh
        .params()
        .iter()
        .map(|p| match merged.get(&p.name) {
            Some(v) => Param { name: p.name.clone(), value: v.clone(), trainable: p.trainable },
            None => p.clone(),
        })
        .collect();
    Ok(ModelParams::from_params(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_compression_mask, SegmentLayout};
    use crate::model::{forward, BoundParams, ForwardOptions, GradPolicy};
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_text: 12,
            vocab_patch: 6,
            n_comp_tokens: 3,
            max_seq_len: 32,
            lora_rank: 4,
            lora_alpha: 8.0,
            ..ModelConfig::default()
        }
    }

    fn logits<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig) -> Tensor<T> {
        let mut tokens = vec![cfg.patch_id(1), cfg.patch_id(4), 5];
        tokens.extend(cfg.comp_ids());
        tokens.extend([1, 2, 3]);
        let mask = build_compression_mask(&SegmentLayout::new(3, 3, 3).unwrap());
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, params, GradPolicy::None);
        let out = forward(&mut tape, &b, cfg, &tokens, &mask, &ForwardOptions::default()).unwrap();
        tape.value(out.logits).clone()
    }

    fn randomize_head<T: Real>(params: &mut ModelParams<T>, rng: &mut ChaCha8Rng) {
        for v in params.get_mut("head").unwrap().data_mut() {
            *v = T::lit(rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn zero_b_is_exact_noop() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut with = ModelParams::<f32>::init(&cfg).unwrap();
        randomize_head(&mut with, &mut rng);
        let without = ModelParams::from_params(
            with.params().iter().filter(|p| !p.name.contains(".lora_")).cloned().collect(),
        );
        assert_eq!(logits(&with, &cfg).data(), logits(&without, &cfg).data());
    }

    #[test]
    fn merged_matches_unmerged() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ModelParams::<f32>::init(&cfg).unwrap();
        randomize_head(&mut p, &mut rng);
        for i in 0..p.len() {
            if p.params()[i].name.ends_with("lora_b") {
                for v in p.param_mut(i).value.data_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let merged = lora_merge(&p, &cfg).unwrap();
        assert!(!merged.has_adapters());
        let d = logits(&p, &cfg).max_abs_diff(&logits(&merged, &cfg));
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn hand_example_rank_one() {
        // Column convention A=[[1,0]], B=[[1],[0]] becomes A_row=[[1],[0]],
        // B_row=[[1,0]] here.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 1.0]]));
        let w = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::from_rows(&[[1.0], [0.0]]));
        let b = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let y = tape.matmul(x, w).unwrap();
        let xa = tape.matmul(x, a).unwrap();
        let xab = tape.matmul(xa, b).unwrap();
        let xab = tape.scale(xab, 1.0 / 1.0);
        let y = tape.add(y, xab).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 1.0]);

        let merged = lora_merge(
            &ModelParams::from_params(vec![
                Param { name: "w".into(), value: Tensor::identity(2), trainable: false },
                Param { name: "w.lora_a".into(), value: Tensor::from_rows(&[[1.0], [0.0]]), trainable: true },
                Param { name: "w.lora_b".into(), value: Tensor::from_rows(&[[1.0, 0.0]]), trainable: true },
            ]),
            &ModelConfig { lora_rank: 1, lora_alpha: 1.0, ..ModelConfig::default() },
        )
        .unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_rank_with_nonzero_adapters_is_rejected() {
        let cfg = cfg();
        let mut p = ModelParams::<f32>::init(&cfg).unwrap();
        let i = p.position("layers.0.attn.q.lora_b").unwrap();
        p.param_mut(i).value.data_mut()[0] = 1.0;
        let zero = ModelConfig { lora_rank: 0, ..cfg };
        assert!(lora_merge(&p, &zero).is_err());
    }
}
