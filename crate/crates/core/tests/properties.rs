//! Randomized invariants of the mask, the contrastive loss, checkpoints and
//! the analysis statistics.

use condense::contrastive::info_nce_from_sims;
use condense::eval::top_share;
use condense::mask::{build_compression_mask, SegmentLayout};
use condense::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use condense::Tensor;
use proptest::prelude::*;

fn square(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n * n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_follows_the_routing_rules(i in 0usize..20, k in 1usize..10, qa in 0usize..20, pad in 0usize..4) {
        let m = build_compression_mask(&SegmentLayout::new(i, k, qa).unwrap()).padded(pad);
        let n = i + k + qa;
        prop_assert_eq!(m.size(), n + pad);
        for r in 0..n + pad {
            for c in 0..n + pad {
                let want = if r >= n { r == c } else if c > r || c >= n { false } else if r < i + k { true } else { c >= i };
                prop_assert_eq!(m.allows(r, c), want, "row {} col {}", r, c);
            }
        }
    }

    #[test]
    fn info_nce_is_non_negative_and_permutation_invariant((n, s) in (1usize..7).prop_flat_map(|n| (Just(n), square(n))), tau in 0.05f64..2.0, rot in 0usize..7) {
        let sims = Tensor::new(vec![n, n], s.clone()).unwrap();
        let l = info_nce_from_sims(&sims, tau).unwrap();
        prop_assert!(l >= 0.0);
        // Relabel the pairs: row and column i move to (i + rot) mod n.
        let mut p = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                p[((r + rot) % n) * n + (c + rot) % n] = s[r * n + c];
            }
        }
        let lp = info_nce_from_sims(&Tensor::new(vec![n, n], p).unwrap(), tau).unwrap();
        prop_assert!((l - lp).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn raising_positive_similarity_lowers_info_nce((n, s) in (2usize..7).prop_flat_map(|n| (Just(n), square(n))), bump in 0.01f64..1.0) {
        let before = info_nce_from_sims(&Tensor::new(vec![n, n], s.clone()).unwrap(), 0.1).unwrap();
        let mut t = s;
        for i in 0..n {
            t[i * n + i] += bump;
        }
        let after = info_nce_from_sims(&Tensor::new(vec![n, n], t).unwrap(), 0.1).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn top_share_is_a_fraction_at_least_the_uniform_share(v in proptest::collection::vec(0.0f64..5.0, 1..60), frac in 0.01f64..1.0) {
        let s = top_share(&v, frac);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        if v.iter().sum::<f64>() > 0.0 {
            let k = ((v.len() as f64 * frac).ceil() as usize).max(1);
            prop_assert!(s + 1e-12 >= k as f64 / v.len() as f64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bitwise(d in 1usize..4, layers in 0usize..3, k in 1usize..5, rank in 0usize..3, seed in any::<u64>()) {
        let cfg = ModelConfig {
            d_model: 8 * d,
            n_layers: layers,
            n_heads: 2,
            d_ff: 16,
            n_comp_tokens: k,
            lora_rank: rank,
            init_seed: seed,
            ..ModelConfig::default()
        };
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let q: ModelParams<f32> = load_checkpoint(&path, &cfg).unwrap();
        prop_assert_eq!(p.len(), q.len());
        for (a, b) in p.params().iter().zip(q.params()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.value.shape(), b.value.shape());
            prop_assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
