//! Per-step attention capture: forward on the prefix that generates a
//! token, backward from that token's log-probability, and the `ATRC`
//! binary dump format.

use std::io::{Read, Write};

use super::model::{build_forward, AttnPerturb, LmParams};
use crate::error::{Error, Result};
use crate::numerics::io::{read_f32_vec, read_u32, write_u32};
use crate::numerics::{Graph, Scalar, Tensor};

pub const TRACE_MAGIC: &[u8; 4] = b"ATRC";
pub const TRACE_VERSION: u32 = 1;

/// One head's post-softmax attention and its gradient, both `s_t x s_t`
/// lower triangular.
#[derive(Clone, Debug)]
pub struct HeadAttention<F: Scalar> {
    pub attn: Tensor<F>,
    pub grad: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct LayerAttention<F: Scalar> {
    pub heads: Vec<HeadAttention<F>>,
}

/// Attention state for one generation step.
#[derive(Clone, Debug)]
pub struct AttentionTrace<F: Scalar> {
    pub step: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerAttention<F>>,
}

impl<F: Scalar> AttentionTrace<F> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    /// Check the structural invariants: rows sum to 1 (within `tol`) and
    /// everything above the diagonal is exactly zero in both matrices.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                let s = self.seq_len;
                if head.attn.shape() != [s, s] || head.grad.shape() != [s, s] {
                    return Err(Error::shape(
                        "attention_trace",
                        format!("layer {l} head {h}: expected [{s},{s}]"),
                    ));
                }
                for i in 0..s {
                    let row_sum: f64 = head.attn.row(i).iter().map(|v| v.as_f64()).sum();
                    if (row_sum - 1.0).abs() > tol {
                        return Err(Error::InvalidArg(format!(
                            "layer {l} head {h} row {i}: attention row sums to {row_sum}"
                        )));
                    }
                    for j in (i + 1)..s {
                        if head.attn.at2(i, j) != F::zero() || head.grad.at2(i, j) != F::zero() {
                            return Err(Error::InvalidArg(format!(
                                "layer {l} head {h}: nonzero above the diagonal at ({i},{j})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything captured for one generation step.
pub struct StepCapture<F: Scalar> {
    pub trace: AttentionTrace<F>,
    /// `[s_t, vocab]` logits of the prefix forward pass.
    pub logits: Tensor<F>,
    /// `log p(y_t | prefix)` — the scalar the backward pass starts from.
    pub log_prob: F,
}

/// Rerun the forward pass on the prefix that generates step `t`'s token and
/// backpropagate from that token's log-probability, populating attention
/// gradients for every layer and head.
///
/// `full_seq` is prompt ++ response; `prompt_len` marks the boundary.
pub fn capture_step<F: Scalar>(
    params: &LmParams<F>,
    full_seq: &[u32],
    prompt_len: usize,
    t: usize,
) -> Result<StepCapture<F>> {
    capture_step_perturbed(params, full_seq, prompt_len, t, None)
}

/// `capture_step` with an optional additive perturbation of one attention
/// entry; the hook the finite-difference oracle uses.
pub fn capture_step_perturbed<F: Scalar>(
    params: &LmParams<F>,
    full_seq: &[u32],
    prompt_len: usize,
    t: usize,
    perturb: Option<&AttnPerturb<F>>,
) -> Result<StepCapture<F>> {
    if prompt_len == 0 || prompt_len > full_seq.len() {
        return Err(Error::InvalidArg(format!(
            "prompt_len {prompt_len} outside sequence of {} tokens",
            full_seq.len()
        )));
    }
    let response_len = full_seq.len() - prompt_len;
    if t >= response_len {
        return Err(Error::InvalidArg(format!(
            "step {t} out of range: response has {response_len} tokens"
        )));
    }
    let s_t = prompt_len + t;
    let prefix = &full_seq[..s_t];
    let target = full_seq[s_t] as usize;

    let mut graph = Graph::new();
    let pass = build_forward(&mut graph, params, prefix, perturb)?;
    let scalar = graph.log_softmax_pick(pass.logits, s_t - 1, target)?;
    let logits = graph.value(pass.logits).clone();
    let log_prob = graph.value(scalar).data()[0];
    let grads = graph.backward(scalar)?;

    let layers = pass
        .attn
        .iter()
        .map(|heads| LayerAttention {
            heads: heads
                .iter()
                .map(|&id| HeadAttention { attn: graph.value(id).clone(), grad: grads.get(id).clone() })
                .collect(),
        })
        .collect();

    Ok(StepCapture { trace: AttentionTrace { step: t, seq_len: s_t, layers }, logits, log_prob })
}

/// Forward-only attention capture over a prompt: gradients are zero.
/// Enough for scoring that reads attention but not its gradient (the
/// first-layer probe and the shallow-attention baseline).
pub fn capture_prompt<F: Scalar>(params: &LmParams<F>, prompt: &[u32]) -> Result<AttentionTrace<F>> {
    let s = prompt.len();
    let mut graph = Graph::new();
    let pass = build_forward(&mut graph, params, prompt, None)?;
    let layers = pass
        .attn
        .iter()
        .map(|heads| LayerAttention {
            heads: heads
                .iter()
                .map(|&id| HeadAttention {
                    attn: graph.value(id).clone(),
                    grad: Tensor::zeros(&[s, s]),
                })
                .collect(),
        })
        .collect();
    Ok(AttentionTrace { step: 0, seq_len: s, layers })
}

// ── ATRC dump ────────────────────────────────────────────────────────

fn write_matrix<F: Scalar, W: Write>(w: &mut W, m: &Tensor<F>) -> Result<()> {
    for v in m.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

/// Write traces as: magic, version, then per step: step, n_layers,
/// n_heads, seq_len (u32 LE each), followed by all attention matrices and
/// then all gradient matrices, layer-major, head-major, row-major f32 LE.
pub fn write_traces<F: Scalar, W: Write>(w: &mut W, traces: &[AttentionTrace<F>]) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    write_u32(w, TRACE_VERSION)?;
    for trace in traces {
        write_u32(w, trace.step as u32)?;
        write_u32(w, trace.n_layers() as u32)?;
        write_u32(w, trace.n_heads() as u32)?;
        write_u32(w, trace.seq_len as u32)?;
        for layer in &trace.layers {
            for head in &layer.heads {
                write_matrix(w, &head.attn)?;
            }
        }
        for layer in &trace.layers {
            for head in &layer.heads {
                write_matrix(w, &head.grad)?;
            }
        }
    }
    Ok(())
}

pub fn read_traces<F: Scalar, R: Read>(r: &mut R) -> Result<Vec<AttentionTrace<F>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format(format!("bad trace magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut step_buf = [0u8; 4];
        match r.read_exact(&mut step_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let step = u32::from_le_bytes(step_buf) as usize;
        let n_layers = read_u32(r)? as usize;
        let n_heads = read_u32(r)? as usize;
        let seq_len = read_u32(r)? as usize;
        let read_mat = |r: &mut R| -> Result<Tensor<F>> {
            let raw = read_f32_vec(r, seq_len * seq_len)?;
            Tensor::from_vec(vec![seq_len, seq_len], raw.into_iter().map(|v| F::from_f64_c(v as f64)).collect())
        };
        let mut attn = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let heads: Vec<Tensor<F>> = (0..n_heads).map(|_| read_mat(r)).collect::<Result<_>>()?;
            attn.push(heads);
        }
        let mut layers = Vec::with_capacity(n_layers);
        for a_heads in attn {
            let mut heads = Vec::with_capacity(n_heads);
            for a in a_heads {
                heads.push(HeadAttention { attn: a, grad: Tensor::zeros(&[seq_len, seq_len]) });
            }
            layers.push(LayerAttention { heads });
        }
        for layer in layers.iter_mut() {
            for head in layer.heads.iter_mut() {
                head.grad = read_mat(r)?;
            }
        }
        out.push(AttentionTrace { step, seq_len, layers });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::data::{encode, gen_gridqa};
    use crate::toylm::model::{generate, LMConfig};
    use crate::toylm::vocab::Vocab;

    fn setup() -> (LmParams<f32>, Vec<u32>, usize) {
        let vocab = Vocab::new(2, 3).unwrap();
        let cfg = LMConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: vocab.required_vocab_size(),
            max_seq: 16,
        };
        let params = LmParams::init(cfg, 3).unwrap();
        let sample = encode(&gen_gridqa(5, 2, 3, 1).unwrap()[0], &vocab);
        let prompt = sample.prompt();
        let prompt_len = prompt.len();
        let mut full = prompt;
        full.extend(generate(&params, &full, 1).unwrap());
        (params, full, prompt_len)
    }

    #[test]
    fn captured_trace_satisfies_invariants() {
        let (params, full, prompt_len) = setup();
        let cap = capture_step(&params, &full, prompt_len, 0).unwrap();
        assert_eq!(cap.trace.seq_len, prompt_len);
        cap.trace.validate(1e-5).unwrap();
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let (params, full, prompt_len) = setup();
        assert!(capture_step(&params, &full, prompt_len, 1).is_err());
    }

    #[test]
    fn capture_logits_match_generation_forward() {
        let (params, full, prompt_len) = setup();
        let cap = capture_step(&params, &full, prompt_len, 0).unwrap();
        let gen_logits = crate::toylm::model::forward_logits(&params, &full[..prompt_len]).unwrap();
        let a = cap.logits.row(prompt_len - 1);
        let b = gen_logits.row(prompt_len - 1);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn atrc_round_trips() {
        let (params, full, prompt_len) = setup();
        let cap = capture_step(&params, &full, prompt_len, 0).unwrap();
        let mut buf = Vec::new();
        write_traces(&mut buf, std::slice::from_ref(&cap.trace)).unwrap();
        assert_eq!(&buf[..4], TRACE_MAGIC);
        let back: Vec<AttentionTrace<f32>> = read_traces(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].seq_len, cap.trace.seq_len);
        for (la, lb) in cap.trace.layers.iter().zip(&back[0].layers) {
            for (ha, hb) in la.heads.iter().zip(&lb.heads) {
                assert_eq!(ha.attn, hb.attn);
                assert_eq!(ha.grad, hb.grad);
            }
        }
    }
}
