//! Finite-difference oracles for the differentiation engine: every
//! primitive over randomized small shapes, plus the MLP, LM-attention, and
//! predictor+KL composites.

use relprune::numerics::{Graph, Tensor};
use relprune::testkit;

#[test]
fn every_primitive_matches_finite_differences_over_100_seeds() {
    let worst = testkit::gradcheck_all_primitives(100).expect("gradcheck runs");
    assert_eq!(worst.len(), testkit::gradcheck_case_names().len());
    for (name, err) in worst {
        assert!(err < 1e-3, "primitive {name}: max rel err {err}");
    }
}

#[test]
fn random_mlp_matches_finite_differences() {
    for seed in 0..5 {
        let err = testkit::gradcheck_mlp(seed).expect("mlp gradcheck runs");
        assert!(err < 1e-3, "seed {seed}: max rel err {err}");
    }
}

#[test]
fn lm_attention_gradients_match_log_prob_finite_differences() {
    let err = testkit::gradcheck_lm_attention(11).expect("attention gradcheck runs");
    assert!(err < 1e-2, "max rel err {err}");
}

#[test]
fn compressor_kl_composite_matches_finite_differences() {
    let err = testkit::gradcheck_compressor_composite(5).expect("composite gradcheck runs");
    assert!(err < 1e-3, "max rel err {err}");
}

#[test]
fn backward_is_bit_identical_across_reruns() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_vec(vec![2, 3], vec![0.3, -0.7, 1.5, 0.2, 0.9, -1.1]).unwrap());
        let w = g.leaf(Tensor::from_vec(vec![3, 2], vec![0.5, -0.25, 1.0, 0.75, -0.6, 0.1]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let p = g.row_softmax(y).unwrap();
        let l = g.cross_entropy(p, &[(0, 1), (1, 0)]).unwrap();
        let grads = g.backward(l).unwrap();
        (grads.get(x).clone(), grads.get(w).clone())
    };
    let (ax, aw) = run();
    let (bx, bw) = run();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ax), bits(&bx));
    assert_eq!(bits(&aw), bits(&bw));
}
