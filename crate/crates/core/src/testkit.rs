//! Test support: finite-difference gradient oracles and synthetic traces.
//!
//! Everything here checks the production code against an independent
//! reference: central finite differences evaluated through an f64
//! instantiation of the same forward math, or naive f64 dense algebra for
//! the relevance recursion. Used by the crate's integration tests and the
//! acceptance suite; not part of the pipeline itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compressor::{build_compressor_forward, CompressorConfig, CompressorParams};
use crate::error::Result;
use crate::explain::AggregationStrategy;
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::toylm::{
    capture_step, capture_step_perturbed, AttentionTrace, AttnPerturb, HeadAttention, LayerAttention,
    LMConfig, LmParams,
};

/// Relative error with a floor that keeps near-zero entries from blowing
/// up the ratio (float32 noise dominates below the floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Plain f64 matmul, independent of the tensor kernels.
pub fn naive_matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

// ── primitive gradient checks ────────────────────────────────────────

/// Sampling domain for a differentiable input.
#[derive(Clone, Copy, Debug)]
enum Domain {
    /// Uniform in [-1, 1].
    Any,
    /// Uniform in [0.2, 1.2]; for inputs that must stay positive.
    Positive,
    /// Magnitude in [0.1, 1.1] with random sign; keeps ReLU kinks far away.
    AwayFromZero,
}

fn sample<F: Scalar>(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v = match domain {
                Domain::Any => rng.gen_range(-1.0..1.0),
                Domain::Positive => rng.gen_range(0.2..1.2),
                Domain::AwayFromZero => {
                    let mag = rng.gen_range(0.1..1.1);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                }
            };
            F::from_f64_c(v)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("finite sample")
}

/// The primitive under test plus any non-differentiable metadata.
#[derive(Clone, Debug)]
enum Prim {
    Add,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Matmul,
    Transpose,
    AddBias,
    SliceCols { start: usize, width: usize },
    ConcatCols,
    RowSoftmax,
    CausalSoftmax,
    LayerNorm,
    Embedding { ids: Vec<usize> },
    DwConv,
    PwConv,
    CrossEntropy { targets: Vec<(usize, usize)> },
    LogSoftmaxPick { row: usize, class: usize },
    KlDiv { label: Vec<f64> },
    Sum,
}

struct Case {
    name: &'static str,
    prim: Prim,
    inputs: Vec<(Vec<usize>, Domain)>,
}

fn build_prim<F: Scalar>(prim: &Prim, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId> {
    match prim {
        Prim::Add => g.add(ids[0], ids[1]),
        Prim::Mul => g.mul(ids[0], ids[1]),
        Prim::Scale(f) => g.scale(ids[0], F::from_f64_c(*f)),
        Prim::Relu => g.relu(ids[0]),
        Prim::Gelu => g.gelu(ids[0]),
        Prim::Matmul => g.matmul(ids[0], ids[1]),
        Prim::Transpose => g.transpose(ids[0]),
        Prim::AddBias => g.add_bias(ids[0], ids[1]),
        Prim::SliceCols { start, width } => g.slice_cols(ids[0], *start, *width),
        Prim::ConcatCols => g.concat_cols(ids),
        Prim::RowSoftmax => g.row_softmax(ids[0]),
        Prim::CausalSoftmax => g.causal_softmax(ids[0]),
        Prim::LayerNorm => g.layer_norm(ids[0], ids[1], ids[2]),
        Prim::Embedding { ids: lookup } => g.embedding(ids[0], lookup),
        Prim::DwConv => g.conv1d_depthwise(ids[0], ids[1], ids[2]),
        Prim::PwConv => g.conv1d_pointwise(ids[0], ids[1], ids[2]),
        Prim::CrossEntropy { targets } => g.cross_entropy(ids[0], targets),
        Prim::LogSoftmaxPick { row, class } => g.log_softmax_pick(ids[0], *row, *class),
        Prim::KlDiv { label } => {
            let q_shape = g.value(ids[0]).shape().to_vec();
            let label = Tensor::from_vec(q_shape, label.iter().map(|&v| F::from_f64_c(v)).collect())?;
            g.kl_div(label, ids[0])
        }
        Prim::Sum => g.sum(ids[0]),
    }
}

fn random_case(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let r = &mut rng;
    let s = r.gen_range(2..=4usize);
    let d = r.gen_range(2..=4usize);
    let n = r.gen_range(3..=6usize);
    let v = r.gen_range(3..=5usize);
    let c = r.gen_range(1..=3usize);
    let c_out = r.gen_range(1..=3usize);
    let start = r.gen_range(0..d);
    let width = r.gen_range(1..=d - start);
    let ids: Vec<usize> = (0..s).map(|_| r.gen_range(0..v)).collect();
    let targets: Vec<(usize, usize)> = (0..2).map(|_| (r.gen_range(0..s), r.gen_range(0..v))).collect();
    let pick = (r.gen_range(0..s), r.gen_range(0..v));
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let label: Vec<f64> = raw.iter().map(|x| x / total).collect();

    vec![
        Case { name: "add", prim: Prim::Add, inputs: vec![(vec![s, d], Domain::Any), (vec![s, d], Domain::Any)] },
        Case { name: "mul", prim: Prim::Mul, inputs: vec![(vec![s, d], Domain::Any), (vec![s, d], Domain::Any)] },
        Case { name: "scale", prim: Prim::Scale(r.gen_range(-2.0..2.0)), inputs: vec![(vec![s, d], Domain::Any)] },
        Case { name: "relu", prim: Prim::Relu, inputs: vec![(vec![s, d], Domain::AwayFromZero)] },
        Case { name: "gelu", prim: Prim::Gelu, inputs: vec![(vec![s, d], Domain::Any)] },
        Case {
            name: "matmul",
            prim: Prim::Matmul,
            inputs: vec![(vec![s, d], Domain::Any), (vec![d, n], Domain::Any)],
        },
        Case { name: "transpose", prim: Prim::Transpose, inputs: vec![(vec![s, d], Domain::Any)] },
        Case {
            name: "add_bias",
            prim: Prim::AddBias,
            inputs: vec![(vec![s, d], Domain::Any), (vec![d], Domain::Any)],
        },
        Case {
            name: "slice_cols",
            prim: Prim::SliceCols { start, width },
            inputs: vec![(vec![s, d], Domain::Any)],
        },
        Case {
            name: "concat_cols",
            prim: Prim::ConcatCols,
            inputs: vec![(vec![s, d], Domain::Any), (vec![s, n], Domain::Any)],
        },
        Case { name: "row_softmax", prim: Prim::RowSoftmax, inputs: vec![(vec![s, d], Domain::Any)] },
        Case { name: "causal_softmax", prim: Prim::CausalSoftmax, inputs: vec![(vec![s, s], Domain::Any)] },
        Case {
            name: "layer_norm",
            prim: Prim::LayerNorm,
            inputs: vec![(vec![s, d + 1], Domain::Any), (vec![d + 1], Domain::AwayFromZero), (vec![d + 1], Domain::Any)],
        },
        Case { name: "embedding", prim: Prim::Embedding { ids }, inputs: vec![(vec![v, d], Domain::Any)] },
        Case {
            name: "conv1d_depthwise",
            prim: Prim::DwConv,
            inputs: vec![(vec![c, n], Domain::Any), (vec![c, 3], Domain::Any), (vec![c], Domain::Any)],
        },
        Case {
            name: "conv1d_pointwise",
            prim: Prim::PwConv,
            inputs: vec![(vec![c, n], Domain::Any), (vec![c_out, c], Domain::Any), (vec![c_out], Domain::Any)],
        },
        Case {
            name: "cross_entropy",
            prim: Prim::CrossEntropy { targets },
            inputs: vec![(vec![s, v], Domain::Any)],
        },
        Case {
            name: "log_softmax_pick",
            prim: Prim::LogSoftmaxPick { row: pick.0, class: pick.1 },
            inputs: vec![(vec![s, v], Domain::Any)],
        },
        Case { name: "kl_div", prim: Prim::KlDiv { label }, inputs: vec![(vec![1, n], Domain::Positive)] },
        Case { name: "sum", prim: Prim::Sum, inputs: vec![(vec![s, d], Domain::Any)] },
    ]
}

/// Scalarizing wrapper: weighted sum of the primitive output so every
/// output entry contributes a distinct gradient path.
fn scalarized<F: Scalar>(
    case: &Case,
    inputs: &[Tensor<F>],
    weights: &Tensor<F>,
) -> Result<(Graph<F>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build_prim(&case.prim, &mut g, &ids)?;
    let w = g.leaf(weights.clone());
    let prod = g.mul(out, w)?;
    let scalar = g.sum(prod)?;
    Ok((g, ids, scalar))
}

/// Max relative error between the f32 analytic gradients of one primitive
/// and central finite differences through the f64 forward path.
fn gradcheck_primitive_case(case: &Case, seed: u64, h: f64, floor: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs32: Vec<Tensor<f32>> =
        case.inputs.iter().map(|(shape, dom)| sample(shape, *dom, &mut rng)).collect();

    // Output shape probe, then a fixed weight tensor for scalarization.
    let out_shape = {
        let mut g = Graph::<f32>::new();
        let ids: Vec<NodeId> = inputs32.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build_prim(&case.prim, &mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let weights32 = sample::<f32>(&out_shape, Domain::AwayFromZero, &mut rng);

    let (mut g, ids, scalar) = scalarized(case, &inputs32, &weights32)?;
    let grads = g.backward(scalar)?;

    let weights64: Tensor<f64> = weights32.cast();
    let eval64 = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, scalar) = scalarized(case, inputs, &weights64)?;
        Ok(g.value(scalar).data()[0])
    };

    let mut inputs64: Vec<Tensor<f64>> = inputs32.iter().map(|t| t.cast()).collect();
    let mut max_err = 0.0f64;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).clone();
        for j in 0..inputs64[i].numel() {
            let orig = inputs64[i].data()[j];
            inputs64[i].data_mut()[j] = orig + h;
            let plus = eval64(&inputs64)?;
            inputs64[i].data_mut()[j] = orig - h;
            let minus = eval64(&inputs64)?;
            inputs64[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic.data()[j] as f64, fd, floor);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Run every primitive over `seeds` randomized shape/value draws and
/// return the worst relative error per primitive.
pub fn gradcheck_all_primitives(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for case in random_case(seed) {
            let err = gradcheck_primitive_case(&case, seed, 1e-3, 0.05)?;
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, w)) => *w = w.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    Ok(worst)
}

/// Three-layer MLP composite: every gradient entry against central finite
/// differences (h = 1e-3). Returns the max relative error.
pub fn gradcheck_mlp(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes: Vec<Vec<usize>> = vec![
        vec![3, 5],  // x
        vec![5, 6],  // w1
        vec![6],     // b1
        vec![6, 6],  // w2
        vec![6],     // b2
        vec![6, 4],  // w3
        vec![4],     // b3
    ];
    let inputs32: Vec<Tensor<f32>> = shapes.iter().map(|s| sample(s, Domain::Any, &mut rng)).collect();
    let weights32 = sample::<f32>(&[3, 4], Domain::AwayFromZero, &mut rng);

    fn build<F: Scalar>(g: &mut Graph<F>, inputs: &[Tensor<F>], w: &Tensor<F>) -> Result<(Vec<NodeId>, NodeId)> {
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let h1 = g.matmul(ids[0], ids[1])?;
        let h1 = g.add_bias(h1, ids[2])?;
        let h1 = g.gelu(h1)?;
        let h2 = g.matmul(h1, ids[3])?;
        let h2 = g.add_bias(h2, ids[4])?;
        let h2 = g.gelu(h2)?;
        let h3 = g.matmul(h2, ids[5])?;
        let h3 = g.add_bias(h3, ids[6])?;
        let wid = g.leaf(w.clone());
        let prod = g.mul(h3, wid)?;
        let s = g.sum(prod)?;
        Ok((ids, s))
    }

    let mut g32 = Graph::<f32>::new();
    let (ids, scalar) = build(&mut g32, &inputs32, &weights32)?;
    let grads = g32.backward(scalar)?;

    let weights64: Tensor<f64> = weights32.cast();
    let mut inputs64: Vec<Tensor<f64>> = inputs32.iter().map(|t| t.cast()).collect();
    let h = 1e-3;
    let mut max_err = 0.0f64;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).clone();
        for j in 0..inputs64[i].numel() {
            let orig = inputs64[i].data()[j];
            inputs64[i].data_mut()[j] = orig + h;
            let mut gp = Graph::<f64>::new();
            let (_, sp) = build(&mut gp, &inputs64, &weights64)?;
            let plus = gp.value(sp).data()[0];
            inputs64[i].data_mut()[j] = orig - h;
            let mut gm = Graph::<f64>::new();
            let (_, sm) = build(&mut gm, &inputs64, &weights64)?;
            let minus = gm.value(sm).data()[0];
            inputs64[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic.data()[j] as f64, fd, 0.05));
        }
    }
    Ok(max_err)
}

/// Attention-gradient oracle on a 2-layer, 1-head, seq-8 instance: every
/// lower-triangular entry of the f32 `∇A` against finite differences of
/// `log p(y_t)` under post-softmax perturbation, run in f64.
pub fn gradcheck_lm_attention(seed: u64) -> Result<f64> {
    let cfg = LMConfig { n_layers: 2, n_heads: 1, d_model: 16, d_ffn: 32, vocab_size: 12, max_seq: 12 };
    let params32 = LmParams::<f32>::init(cfg, seed)?;
    let params64: LmParams<f64> = params32.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let full: Vec<u32> = (0..9).map(|_| rng.gen_range(0..12u32)).collect();
    let prompt_len = 8;

    let cap = capture_step(&params32, &full, prompt_len, 0)?;
    let h = 1e-4;
    let mut max_err = 0.0f64;
    for layer in 0..cfg.n_layers {
        let grad = &cap.trace.layers[layer].heads[0].grad;
        for i in 0..prompt_len {
            for j in 0..=i {
                let fd_at = |delta: f64| -> Result<f64> {
                    let p = AttnPerturb { layer, head: 0, row: i, col: j, delta };
                    let c = capture_step_perturbed(&params64, &full, prompt_len, 0, Some(&p))?;
                    Ok(c.log_prob)
                };
                let fd = (fd_at(h)? - fd_at(-h)?) / (2.0 * h);
                max_err = max_err.max(rel_err(grad.at2(i, j) as f64, fd, 0.05));
            }
        }
    }
    Ok(max_err)
}

/// Full predictor-plus-KL composite on a width-8 instance with a small
/// channel stack; gradients of every parameter and the probe input
/// against f64 finite differences.
pub fn gradcheck_compressor_composite(seed: u64) -> Result<f64> {
    let config = CompressorConfig { n_layers: 3, kernel: 3, channels: vec![3, 4, 6] };
    let params32 = CompressorParams::<f32>::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let a0v32: Vec<f32> = (0..8).map(|_| rng.gen_range(0.01..0.5)).collect();
    let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let label: Vec<f64> = raw.iter().map(|v| v / total).collect();

    fn loss<F: Scalar>(params: &CompressorParams<F>, a0v: &[F], label: &[f64]) -> Result<(Graph<F>, Vec<NodeId>, NodeId, NodeId)> {
        let mut g = Graph::new();
        let input_leaf_probe = g.len();
        let pass = build_compressor_forward(&mut g, params, a0v)?;
        let label_t =
            Tensor::from_vec(vec![1, label.len()], label.iter().map(|&v| F::from_f64_c(v)).collect())?;
        let kl = g.kl_div(label_t, pass.output)?;
        Ok((g, pass.param_ids, kl, input_leaf_probe))
    }

    let (mut g32, param_ids, kl32, probe_id) = loss(&params32, &a0v32, &label)?;
    let grads = g32.backward(kl32)?;

    let mut params64: CompressorParams<f64> = params32.cast();
    let mut a0v64: Vec<f64> = a0v32.iter().map(|&v| v as f64).collect();
    let h = 1e-4;
    let mut max_err = 0.0f64;

    let eval = |params: &CompressorParams<f64>, a0v: &[f64]| -> Result<f64> {
        let (g, _, kl, _) = loss(params, a0v, &label)?;
        Ok(g.value(kl).data()[0])
    };

    // Probe input gradient.
    let probe_grad = grads.get(probe_id).clone();
    for j in 0..a0v64.len() {
        let orig = a0v64[j];
        a0v64[j] = orig + h;
        let plus = eval(&params64, &a0v64)?;
        a0v64[j] = orig - h;
        let minus = eval(&params64, &a0v64)?;
        a0v64[j] = orig;
        let fd = (plus - minus) / (2.0 * h);
        max_err = max_err.max(rel_err(probe_grad.data()[j] as f64, fd, 0.05));
    }

    // Parameter gradients, in flat tensor order.
    for (t_idx, id) in param_ids.iter().enumerate() {
        let analytic = grads.get(*id).clone();
        for j in 0..analytic.numel() {
            let orig = params64.tensors()[t_idx].data()[j];
            params64.tensors_mut()[t_idx].data_mut()[j] = orig + h;
            let plus = eval(&params64, &a0v64)?;
            params64.tensors_mut()[t_idx].data_mut()[j] = orig - h;
            let minus = eval(&params64, &a0v64)?;
            params64.tensors_mut()[t_idx].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic.data()[j] as f64, fd, 0.05));
        }
    }
    Ok(max_err)
}

// ── synthetic traces and the relevance-recursion oracle ──────────────

/// Random trace: row-stochastic lower-triangular attention, arbitrary
/// lower-triangular gradients.
pub fn random_trace(seed: u64, seq: usize, n_layers: usize, n_heads: usize) -> AttentionTrace<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let mut attn = vec![0.0f32; seq * seq];
            let mut grad = vec![0.0f32; seq * seq];
            for i in 0..seq {
                let mut row: Vec<f64> = (0..=i).map(|_| rng.gen_range(0.01..1.0)).collect();
                let total: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= total;
                }
                for (j, v) in row.iter().enumerate() {
                    attn[i * seq + j] = *v as f32;
                    grad[i * seq + j] = rng.gen_range(-1.0..1.0f64) as f32;
                }
            }
            heads.push(HeadAttention {
                attn: Tensor::from_vec(vec![seq, seq], attn).expect("finite"),
                grad: Tensor::from_vec(vec![seq, seq], grad).expect("finite"),
            });
        }
        layers.push(LayerAttention { heads });
    }
    AttentionTrace { step: 0, seq_len: seq, layers }
}

/// Closed-form oracle for the relevance recursion: the product
/// `(I + M_{L-1}) ... (I + M_0)` evaluated with naive f64 matmuls.
pub fn relevance_oracle_f64(trace: &AttentionTrace<f32>, strategy: AggregationStrategy) -> Vec<f64> {
    let s = trace.seq_len;
    let mut acc: Vec<f64> = (0..s * s).map(|i| if i % (s + 1) == 0 { 1.0 } else { 0.0 }).collect();
    for layer in &trace.layers {
        let mut m = vec![0.0f64; s * s];
        for head in &layer.heads {
            for i in 0..s * s {
                let a = head.attn.data()[i] as f64;
                let term = match strategy {
                    AggregationStrategy::GradWeighted => a * head.grad.data()[i] as f64,
                    AggregationStrategy::MeanWeighted => a,
                };
                m[i] += term;
            }
        }
        let inv = 1.0 / layer.heads.len() as f64;
        let mut factor = vec![0.0f64; s * s];
        for i in 0..s * s {
            factor[i] = m[i] * inv;
        }
        for i in 0..s {
            factor[i * s + i] += 1.0;
        }
        acc = naive_matmul_f64(&factor, &acc, s, s, s);
    }
    acc
}

/// Names of the primitives the gradcheck sweep covers.
pub fn gradcheck_case_names() -> Vec<&'static str> {
    random_case(0).iter().map(|c| c.name).collect()
}
