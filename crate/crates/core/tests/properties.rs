//! Randomized properties of masks, the attention kernel and the projector.

use ccam::masks::{build_ccam_continuous, build_ccam_floor, build_full, MaskRule};
use ccam::numkernel::{masked_attend_with_weights, Matrix, TokenMask};
use ccam::projector::{forward_video, init_params, FrameEmbeddings, ProjectorConfig};
use ccam::rng::{gaussian, substream};
use proptest::prelude::*;

fn small_cfg(n: usize, seed: u64) -> ProjectorConfig {
    ProjectorConfig {
        n_queries: n,
        model_dim: 16,
        input_dim: 6,
        n_heads: 4,
        seed,
        ..ProjectorConfig::default()
    }
}

fn random_frames(t: usize, l: usize, c: usize, seed: u64) -> FrameEmbeddings {
    let mut rng = substream(seed, "test-frames");
    FrameEmbeddings::from_tokens(l, Matrix::from_fn(t * l, c, |_, _| gaussian(&mut rng, 1.0))).unwrap()
}

/// Mask with at least one visible key per row.
fn mask_strategy(n: usize, k: usize) -> impl Strategy<Value = TokenMask> {
    (proptest::collection::vec(any::<bool>(), n * k), proptest::collection::vec(0..k, n)).prop_map(move |(mut bits, keep)| {
        for (q, &j) in keep.iter().enumerate() {
            bits[q * k + j] = true;
        }
        TokenMask::from_bits(n, k, bits).unwrap()
    })
}

fn attention_case() -> impl Strategy<Value = (Matrix, TokenMask, Matrix)> {
    (1usize..6, 1usize..7, 1usize..4).prop_flat_map(|(n, k, d)| {
        (
            proptest::collection::vec(-30.0f64..30.0, n * k),
            mask_strategy(n, k),
            proptest::collection::vec(-5.0f64..5.0, k * d),
        )
            .prop_map(move |(l, m, v)| (Matrix::from_vec(n, k, l).unwrap(), m, Matrix::from_vec(k, d, v).unwrap()))
    })
}

proptest! {
    #[test]
    fn ccam_masks_match_predicates(n in 1usize..=48, t_raw in 1usize..=48) {
        let t = t_raw.min(n);
        let floor = build_ccam_floor(n, t).unwrap();
        let cont = build_ccam_continuous(n, t).unwrap();
        for i in 0..n {
            for j in 0..t {
                prop_assert_eq!(floor.get(i, j), i >= j * (n / t));
                prop_assert_eq!(cont.get(i, j), j * n <= (i + 1) * t);
            }
        }
        floor.check_invariants().unwrap();
        cont.check_invariants().unwrap();
    }

    #[test]
    fn continuous_mask_any_counts(n in 1usize..=40, t in 1usize..=80) {
        let m = build_ccam_continuous(n, t).unwrap();
        m.check_invariants().unwrap();
        prop_assert!(m.row(n - 1).iter().all(|&b| b));
        for i in 1..n {
            prop_assert!(m.prefix_len(i) >= m.prefix_len(i - 1));
        }
    }

    #[test]
    fn weights_rows_are_distributions((logits, mask, values) in attention_case()) {
        let (_, w) = masked_attend_with_weights(&logits, &mask, &values).unwrap();
        for q in 0..w.rows() {
            let s: f64 = w.row(q).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for k in 0..w.cols() {
                prop_assert!(w[(q, k)] >= 0.0);
                if !mask.get(q, k) {
                    prop_assert_eq!(w[(q, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn outputs_are_convex_combinations((logits, mask, values) in attention_case()) {
        let (out, _) = masked_attend_with_weights(&logits, &mask, &values).unwrap();
        for q in 0..out.rows() {
            for d in 0..out.cols() {
                let vis: Vec<f64> = (0..values.rows()).filter(|&k| mask.get(q, k)).map(|k| values[(k, d)]).collect();
                let lo = vis.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[(q, d)] >= lo - 1e-12 && out[(q, d)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn row_shift_invariance((logits, mask, values) in attention_case(), shifts in proptest::collection::vec(-50.0f64..50.0, 6)) {
        let shifted = Matrix::from_fn(logits.rows(), logits.cols(), |q, k| logits[(q, k)] + shifts[q]);
        let (a, _) = masked_attend_with_weights(&logits, &mask, &values).unwrap();
        let (b, _) = masked_attend_with_weights(&shifted, &mask, &values).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn huge_logits_stay_finite((logits, mask, values) in attention_case(), scale in 1e2f64..1e6) {
        let big = logits.scale(scale);
        let (out, _) = masked_attend_with_weights(&big, &mask, &values).unwrap();
        prop_assert!(out.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_mask_permutation_invariance(seed in 0u64..1_000, perm_seed in any::<u64>(), t in 2usize..9, l in 1usize..4) {
        use rand::seq::SliceRandom;
        let cfg = small_cfg(8, seed);
        let params = init_params(&cfg).unwrap();
        let frames = random_frames(t, l, cfg.input_dim, seed);
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut substream(perm_seed, "perm"));
        let mask = build_full(cfg.n_queries, t).unwrap();
        let a = forward_video(&params, &frames, &mask).unwrap();
        let b = forward_video(&params, &frames.reorder(&order).unwrap(), &mask).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn output_size_is_fixed(t in 1usize..=128, l in 1usize..3, rule in prop_oneof![Just(MaskRule::Full), Just(MaskRule::CcamContinuous)]) {
        let cfg = small_cfg(8, 1);
        let params = init_params(&cfg).unwrap();
        let frames = random_frames(t, l, cfg.input_dim, t as u64);
        let y = forward_video(&params, &frames, &rule.build(cfg.n_queries, t).unwrap()).unwrap();
        prop_assert_eq!(y.shape(), (8, 16));
        prop_assert!(y.is_finite());
    }
}

#[test]
fn ccam_is_order_sensitive() {
    for rule in [MaskRule::CcamFloor, MaskRule::CcamContinuous] {
        for seed in 0..10 {
            let cfg = small_cfg(16, seed);
            let params = init_params(&cfg).unwrap();
            let frames = random_frames(8, 2, cfg.input_dim, seed);
            let mask = rule.build(16, 8).unwrap();
            let a = forward_video(&params, &frames, &mask).unwrap();
            let b = forward_video(&params, &frames.swap_frames(0, 7).unwrap(), &mask).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() >= 1e-6, "{rule} seed {seed}");
        }
    }
}

#[test]
fn floor_rule_rejects_fewer_queries_than_frames() {
    assert!(build_ccam_floor(4, 5).is_err());
    assert!(build_ccam_continuous(4, 5).is_ok());
}
