//! The toy decoder-only LM: pre-norm transformer blocks, learned absolute
//! position embeddings, eager (full-matrix) causal attention.

use std::io::{BufRead, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, read_u32, write_tensor, write_u32};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

pub const LM_MAGIC: &[u8; 4] = b"TLM0";
pub const LM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl LMConfig {
    /// Default-size model for a given vocabulary and sequence budget.
    pub fn with_defaults(vocab_size: usize, max_seq: usize) -> Self {
        LMConfig { n_layers: 4, n_heads: 4, d_model: 64, d_ffn: 256, vocab_size, max_seq }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArg(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::InvalidArg("all LM dimensions must be positive".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn tensors_per_layer() -> usize {
        16
    }

    fn n_tensors(&self) -> usize {
        2 + self.n_layers * Self::tensors_per_layer() + 4
    }
}

// Parameter tensor indices.
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const LAYER_BASE: usize = 2;
// Within a layer:
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

/// Trained (or freshly initialized) LM parameters.
#[derive(Clone, Debug)]
pub struct LmParams<F: Scalar> {
    pub config: LMConfig,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> LmParams<F> {
    /// Gaussian init (std 0.02) for embeddings and projections, identity
    /// layer norms, zero biases.
    pub fn init(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ffn;
        let v = config.vocab_size;
        let std = 0.02;
        let mut tensors = Vec::with_capacity(config.n_tensors());
        tensors.push(Tensor::randn(&[v, d], std, &mut rng)); // TOK_EMB
        tensors.push(Tensor::randn(&[config.max_seq, d], std, &mut rng)); // POS_EMB
        for _ in 0..config.n_layers {
            tensors.push(Tensor::filled(&[d], F::one())?); // LN1_G
            tensors.push(Tensor::zeros(&[d])); // LN1_B
            for _ in 0..4 {
                // WQ, WK, WV, WO interleaved with their biases
                tensors.push(Tensor::randn(&[d, d], std, &mut rng));
                tensors.push(Tensor::zeros(&[d]));
            }
            tensors.push(Tensor::filled(&[d], F::one())?); // LN2_G
            tensors.push(Tensor::zeros(&[d])); // LN2_B
            tensors.push(Tensor::randn(&[d, f], std, &mut rng)); // W1
            tensors.push(Tensor::zeros(&[f])); // B1
            tensors.push(Tensor::randn(&[f, d], std, &mut rng)); // W2
            tensors.push(Tensor::zeros(&[d])); // B2
        }
        tensors.push(Tensor::filled(&[d], F::one())?); // final LN gain
        tensors.push(Tensor::zeros(&[d])); // final LN shift
        tensors.push(Tensor::randn(&[d, v], std, &mut rng)); // W_OUT
        tensors.push(Tensor::zeros(&[v])); // B_OUT
        Ok(LmParams { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn from_tensors(config: LMConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if tensors.len() != config.n_tensors() {
            return Err(Error::shape(
                "lm_params",
                format!("expected {} tensors, got {}", config.n_tensors(), tensors.len()),
            ));
        }
        Ok(LmParams { config, tensors })
    }

    pub fn cast<G: Scalar>(&self) -> LmParams<G> {
        LmParams { config: self.config, tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

/// Additive perturbation of one post-softmax attention entry; used by the
/// finite-difference checks of attention gradients.
#[derive(Clone, Copy, Debug)]
pub struct AttnPerturb<F> {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: F,
}

/// Node ids of interest from one recorded forward pass.
pub struct ForwardPass {
    /// `[seq, vocab]` logits node.
    pub logits: NodeId,
    /// Post-softmax attention node per `[layer][head]`.
    pub attn: Vec<Vec<NodeId>>,
    /// Leaf ids of the parameter tensors, in `LmParams::tensors` order.
    pub param_ids: Vec<NodeId>,
}

/// Record the full forward pass for `tokens` on `graph`.
pub fn build_forward<F: Scalar>(
    graph: &mut Graph<F>,
    params: &LmParams<F>,
    tokens: &[u32],
    perturb: Option<&AttnPerturb<F>>,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    let s = tokens.len();
    if s == 0 {
        return Err(Error::InvalidArg("empty token sequence".to_string()));
    }
    if s > cfg.max_seq {
        return Err(Error::InvalidArg(format!("sequence length {s} exceeds max_seq {}", cfg.max_seq)));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::InvalidArg(format!("token id {t} outside vocab {}", cfg.vocab_size)));
        }
    }

    let param_ids: Vec<NodeId> = params.tensors.iter().map(|t| graph.leaf(t.clone())).collect();
    let layer_slot = |l: usize, off: usize| param_ids[LAYER_BASE + l * LMConfig::tensors_per_layer() + off];

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..s).collect();
    let tok = graph.embedding(param_ids[TOK_EMB], &ids)?;
    let pos = graph.embedding(param_ids[POS_EMB], &positions)?;
    let mut x = graph.add(tok, pos)?;

    let dh = cfg.head_dim();
    let inv_sqrt = F::from_f64_c(1.0 / (dh as f64).sqrt());
    let mut attn_ids = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let h = graph.layer_norm(x, layer_slot(l, LN1_G), layer_slot(l, LN1_B))?;
        let q = graph.matmul(h, layer_slot(l, WQ))?;
        let q = graph.add_bias(q, layer_slot(l, BQ))?;
        let k = graph.matmul(h, layer_slot(l, WK))?;
        let k = graph.add_bias(k, layer_slot(l, BK))?;
        let v = graph.matmul(h, layer_slot(l, WV))?;
        let v = graph.add_bias(v, layer_slot(l, BV))?;

        let mut layer_attn = Vec::with_capacity(cfg.n_heads);
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = graph.slice_cols(q, hd * dh, dh)?;
            let kh = graph.slice_cols(k, hd * dh, dh)?;
            let vh = graph.slice_cols(v, hd * dh, dh)?;
            let kt = graph.transpose(kh)?;
            let scores = graph.matmul(qh, kt)?;
            let scaled = graph.scale(scores, inv_sqrt)?;
            let attn = graph.causal_softmax(scaled)?;
            layer_attn.push(attn);
            let mut attn_used = attn;
            if let Some(p) = perturb {
                if p.layer == l && p.head == hd {
                    let mut delta = Tensor::zeros(&[s, s]);
                    delta.data_mut()[p.row * s + p.col] = p.delta;
                    let delta = graph.leaf(delta);
                    attn_used = graph.add(attn, delta)?;
                }
            }
            head_outs.push(graph.matmul(attn_used, vh)?);
        }
        attn_ids.push(layer_attn);
        let merged = graph.concat_cols(&head_outs)?;
        let proj = graph.matmul(merged, layer_slot(l, WO))?;
        let proj = graph.add_bias(proj, layer_slot(l, BO))?;
        x = graph.add(x, proj)?;

        let h2 = graph.layer_norm(x, layer_slot(l, LN2_G), layer_slot(l, LN2_B))?;
        let f1 = graph.matmul(h2, layer_slot(l, W1))?;
        let f1 = graph.add_bias(f1, layer_slot(l, B1))?;
        let act = graph.gelu(f1)?;
        let f2 = graph.matmul(act, layer_slot(l, W2))?;
        let f2 = graph.add_bias(f2, layer_slot(l, B2))?;
        x = graph.add(x, f2)?;
    }

    let final_base = LAYER_BASE + cfg.n_layers * LMConfig::tensors_per_layer();
    let xf = graph.layer_norm(x, param_ids[final_base], param_ids[final_base + 1])?;
    let logits = graph.matmul(xf, param_ids[final_base + 2])?;
    let logits = graph.add_bias(logits, param_ids[final_base + 3])?;

    Ok(ForwardPass { logits, attn: attn_ids, param_ids })
}

/// `[seq, vocab]` logits for a token sequence (no gradient bookkeeping kept).
pub fn forward_logits<F: Scalar>(params: &LmParams<F>, tokens: &[u32]) -> Result<Tensor<F>> {
    let mut graph = Graph::new();
    let pass = build_forward(&mut graph, params, tokens, None)?;
    Ok(graph.value(pass.logits).clone())
}

fn argmax_in<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding, eager attention, no KV cache. Deterministic; ties pick
/// the lower token id.
pub fn generate<F: Scalar>(params: &LmParams<F>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.len() + max_new > params.config.max_seq {
        return Err(Error::InvalidArg(format!(
            "prompt {} + max_new {max_new} exceeds max_seq {}",
            prompt.len(),
            params.config.max_seq
        )));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let logits = forward_logits(params, &seq)?;
        let next = argmax_in(logits.row(logits.rows() - 1)) as u32;
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Exact-match grading for grid QA: argmax over the answer alphabet
/// (token ids `0..n_symbols`) at the answer position. Restricting the
/// argmax to the alphabet the answer is drawn from makes chance level
/// exactly `1/n_symbols` for an untrained model.
pub fn answer_argmax<F: Scalar>(params: &LmParams<F>, prompt: &[u32], n_symbols: usize) -> Result<u32> {
    let logits = forward_logits(params, prompt)?;
    let last = logits.row(logits.rows() - 1);
    Ok(argmax_in(&last[..n_symbols]) as u32)
}

// ── parameter file: TLM0 header, JSON config, TNSR blocks ────────────

pub fn write_lm<F: Scalar, W: Write>(w: &mut W, params: &LmParams<F>) -> Result<()> {
    w.write_all(LM_MAGIC)?;
    write_u32(w, LM_VERSION)?;
    let config = serde_json::to_vec(&params.config)?;
    write_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    write_u32(w, params.tensors.len() as u32)?;
    for t in &params.tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_lm<F: Scalar, R: Read + BufRead>(r: &mut R) -> Result<LmParams<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LM_MAGIC {
        return Err(Error::Format(format!("bad LM magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != LM_VERSION {
        return Err(Error::Format(format!("unsupported LM version {version}")));
    }
    let config_len = read_u32(r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: LMConfig = serde_json::from_slice(&config_bytes)?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(r)?);
    }
    LmParams::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::data::{encode, gen_gridqa};
    use crate::toylm::vocab::Vocab;

    fn tiny_params() -> LmParams<f32> {
        let vocab = Vocab::new(2, 3).unwrap();
        let cfg = LMConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: vocab.required_vocab_size(),
            max_seq: 16,
        };
        LmParams::init(cfg, 42).unwrap()
    }

    #[test]
    fn generate_zero_tokens_is_empty() {
        let params = tiny_params();
        let out = generate(&params, &[0, 1, 2], 0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn generate_is_deterministic() {
        let params = tiny_params();
        let a = generate(&params, &[0, 1, 2, 3], 3).unwrap();
        let b = generate(&params, &[0, 1, 2, 3], 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_rejects_overlong_prompt() {
        let params = tiny_params();
        let prompt = vec![0u32; 15];
        assert!(generate(&params, &prompt, 2).is_err());
    }

    #[test]
    fn causality_later_tokens_do_not_affect_earlier_logits() {
        let params = tiny_params();
        let vocab = Vocab::new(2, 3).unwrap();
        let sample = encode(&gen_gridqa(1, 2, 3, 1).unwrap()[0], &vocab);
        let prompt = sample.prompt();
        let mut altered = prompt.clone();
        let p = 4;
        altered[p + 2] = if altered[p + 2] == 0 { 1 } else { 0 };
        let a = forward_logits(&params, &prompt).unwrap();
        let b = forward_logits(&params, &altered).unwrap();
        for row in 0..=p {
            assert_eq!(a.row(row), b.row(row), "logits at position {row} changed");
        }
    }

    #[test]
    fn lm_file_round_trips() {
        let params = tiny_params();
        let mut buf = Vec::new();
        write_lm(&mut buf, &params).unwrap();
        let back: LmParams<f32> = read_lm(&mut std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.config, params.config);
        assert_eq!(back.tensors(), params.tensors());
    }
}
