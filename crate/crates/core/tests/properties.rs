//! Property tests over the distribution and ranking invariants.

use proptest::prelude::*;

use relprune::compress::{keep_count, topk_plan};
use relprune::compressor::{predict, prepare_label, CompressorConfig, CompressorParams};
use relprune::explain::{RelevanceScores, Source};
use relprune::numerics::{ops, Tensor};

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-10.0f32..10.0, n..=n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn row_softmax_rows_are_distributions(data in finite_vec(24)) {
        let x = Tensor::from_vec(vec![4, 6], data).unwrap();
        let p = ops::row_softmax(&x).unwrap();
        for i in 0..4 {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(a in finite_vec(6), b in finite_vec(6)) {
        let p = ops::row_softmax(&Tensor::from_vec(vec![1, 6], a).unwrap()).unwrap();
        let q = ops::row_softmax(&Tensor::from_vec(vec![1, 6], b).unwrap()).unwrap();
        let kl = ops::kl_div(p.data(), q.data()).unwrap() as f64;
        prop_assert!(kl >= -1e-9, "kl {kl}");
        let max_gap = p.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        if kl.abs() < 1e-9 {
            // Equality in KL implies (near-)equality of the distributions.
            prop_assert!(max_gap < 1e-3, "zero KL but gap {max_gap}");
        }
        if max_gap < 1e-7 {
            prop_assert!(kl < 1e-9, "identical distributions but KL {kl}");
        }
    }

    #[test]
    fn topk_is_monotone_in_ratio(values in finite_vec(12), r1 in 0.05f64..1.0, r2 in 0.05f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let scores = RelevanceScores::new(values, Source::Explained).unwrap();
        let small = topk_plan(&scores, lo).unwrap();
        let big = topk_plan(&scores, hi).unwrap();
        for i in &small.kept {
            prop_assert!(big.kept.contains(i), "ratio nesting violated at {i}");
        }
    }

    #[test]
    fn topk_is_invariant_to_affine_rescaling(values in finite_vec(10), c in 0.01f32..50.0, b in -5.0f32..5.0) {
        let scores = RelevanceScores::new(values.clone(), Source::Explained).unwrap();
        let mapped: Vec<f32> = values.iter().map(|v| c * v + b).collect();
        let scaled = RelevanceScores::new(mapped, Source::Explained).unwrap();
        let p1 = topk_plan(&scores, 0.5).unwrap();
        let p2 = topk_plan(&scaled, 0.5).unwrap();
        prop_assert_eq!(p1.kept, p2.kept);
    }

    #[test]
    fn topk_kept_indices_are_sorted_unique(values in finite_vec(9), ratio in 0.05f64..1.0) {
        let scores = RelevanceScores::new(values, Source::Explained).unwrap();
        let plan = topk_plan(&scores, ratio).unwrap();
        prop_assert_eq!(plan.kept.len(), keep_count(ratio, 9).unwrap());
        for w in plan.kept.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(plan.kept.iter().all(|&i| i < 9));
    }

    #[test]
    fn keep_count_stays_in_bounds(ratio in 0.001f64..1.0, n in 1usize..200) {
        let k = keep_count(ratio, n).unwrap();
        prop_assert!(k >= 1 && k <= n);
    }
}

#[test]
fn prepare_label_yields_distributions_on_1000_random_vectors() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let n = rng.gen_range(2..40);
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let scores = RelevanceScores::new(values, Source::Explained).unwrap();
        let (label, _degenerate) = prepare_label(&scores).unwrap();
        assert!(label.r_v.iter().all(|&v| v >= 0.0), "case {case}: negative mass");
        let sum: f64 = label.r_v.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "case {case}: sum {sum}");
    }
}

#[test]
fn predict_yields_distributions_on_1000_random_inputs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let config = CompressorConfig { n_layers: 3, kernel: 3, channels: vec![4, 8, 12] };
    let params_a = CompressorParams::<f32>::init(config.clone(), 1).unwrap();
    let params_b = CompressorParams::<f32>::init(config, 2).unwrap();
    for case in 0..1000 {
        let params = if case % 2 == 0 { &params_a } else { &params_b };
        let n = rng.gen_range(3..48);
        let input: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = predict(params, &input).unwrap();
        assert_eq!(out.r_v.len(), n);
        assert!(out.r_v.iter().all(|&v| v >= 0.0), "case {case}: negative probability");
        let sum: f64 = out.r_v.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "case {case}: sum {sum}");
    }
}
