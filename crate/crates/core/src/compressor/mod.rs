//! The learned compressor: a small fully-convolutional network that maps
//! the head- and instruction-averaged first-layer attention over visual
//! tokens to a predicted relevance distribution, trained with a KL
//! objective against masked, normalized explained relevance.

pub mod net;
pub mod train;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::compress::keep_count;
use crate::error::{Error, Result};
use crate::explain::{RelevanceScores, Source};
use crate::numerics::{ops, Scalar};
use crate::toylm::{AttentionTrace, PromptLayout};

pub use net::{
    build_compressor_forward, predict, read_compressor, write_compressor, CompressorParams, LayerParams,
    COMPRESSOR_MAGIC, COMPRESSOR_VERSION,
};
pub use train::{build_dataset, train_compressor, CompressorReport, CompressorTrainOptions};

/// Architecture of the predictor: depthwise-separable 1-D conv layers with
/// a pointwise aggregation head and a positional softmax.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorConfig {
    #[serde(rename = "layers")]
    pub n_layers: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig { n_layers: 5, kernel: 3, channels: vec![32, 64, 128, 256, 512] }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.n_layers {
            return Err(Error::InvalidArg(format!(
                "{} channel dims for {} layers",
                self.channels.len(),
                self.n_layers
            )));
        }
        if self.n_layers == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArg("layers and channel dims must be positive".to_string()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArg(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Input channels of layer `l` (layer 0 reads the single probe channel).
    pub fn c_in(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.channels[l - 1]
        }
    }
}

/// One training pair: the first-layer attention probe and its label.
#[derive(Clone, Debug)]
pub struct TrainingExample<F: Scalar> {
    pub sample_id: u64,
    pub a0v: Vec<F>,
    pub label: RelevanceScores<F>,
    pub degenerate: bool,
}

impl<F: Scalar> TrainingExample<F> {
    pub fn len(&self) -> usize {
        self.a0v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a0v.is_empty()
    }
}

/// Extract the averaged first-layer attention over visual tokens: take
/// layer-0 attention, average heads, slice instruction rows x visual
/// columns, then average over the instruction rows.
pub fn extract_a0v<F: Scalar>(trace: &AttentionTrace<F>, layout: &PromptLayout) -> Result<Vec<F>> {
    if trace.n_layers() == 0 {
        return Err(Error::InvalidArg("trace has no layers".to_string()));
    }
    if trace.seq_len < layout.total() {
        return Err(Error::shape(
            "extract_a0v",
            format!("layout needs {} positions, trace has {}", layout.total(), trace.seq_len),
        ));
    }
    let heads = &trace.layers[0].heads;
    let n_terms = (heads.len() * layout.n_instr) as f64;
    let mut out = vec![F::zero(); layout.n_vis];
    for head in heads {
        for row in layout.instruction_range() {
            let r = head.attn.row(row);
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o + r[layout.n_sys + j];
            }
        }
    }
    let inv = F::from_f64_c(1.0 / n_terms);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(out)
}

/// Build a training label from explained relevance: clamp negatives, zero
/// the bottom half (ties zero the lower index first), normalize to sum 1.
/// An all-zero result falls back to the uniform distribution and is
/// flagged degenerate.
pub fn prepare_label<F: Scalar>(r_v: &RelevanceScores<F>) -> Result<(RelevanceScores<F>, bool)> {
    let n = r_v.len();
    if n == 0 {
        return Err(Error::InvalidArg("empty relevance vector".to_string()));
    }
    let mut values: Vec<F> = r_v.r_v.iter().map(|&v| v.max(F::zero())).collect();
    let zero_count = n - keep_count(0.5, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite scores").then(i.cmp(&j)));
    for &i in order.iter().take(zero_count) {
        values[i] = F::zero();
    }
    let total: f64 = values.iter().map(|v| v.as_f64()).sum();
    let degenerate = total <= 0.0;
    if degenerate {
        let u = F::from_f64_c(1.0 / n as f64);
        values = vec![u; n];
    } else {
        let inv = F::from_f64_c(1.0 / total);
        for v in values.iter_mut() {
            *v = *v * inv;
        }
    }
    Ok((RelevanceScores::new(values, Source::Label)?, degenerate))
}

/// `KL(label ‖ predicted)` with `0·ln 0 = 0`.
pub fn kl_loss<F: Scalar>(label: &RelevanceScores<F>, predicted: &RelevanceScores<F>) -> Result<F> {
    ops::kl_div(&label.r_v, &predicted.r_v)
}

// ── training-pair JSONL ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sample_id: u64,
    pub a0v: Vec<f32>,
    pub label: Vec<f32>,
    pub degenerate: bool,
}

impl PairRecord {
    pub fn from_example<F: Scalar>(ex: &TrainingExample<F>) -> Self {
        PairRecord {
            sample_id: ex.sample_id,
            a0v: ex.a0v.iter().map(|v| v.as_f32()).collect(),
            label: ex.label.r_v.iter().map(|v| v.as_f32()).collect(),
            degenerate: ex.degenerate,
        }
    }

    pub fn to_example<F: Scalar>(&self) -> Result<TrainingExample<F>> {
        Ok(TrainingExample {
            sample_id: self.sample_id,
            a0v: self.a0v.iter().map(|&v| F::from_f64_c(v as f64)).collect(),
            label: RelevanceScores::new(
                self.label.iter().map(|&v| F::from_f64_c(v as f64)).collect(),
                Source::Label,
            )?,
            degenerate: self.degenerate,
        })
    }
}

pub fn write_pairs_jsonl<W: Write>(w: &mut W, records: &[PairRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(r: R) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::toylm::{HeadAttention, LayerAttention};

    fn scores(v: &[f64]) -> RelevanceScores<f64> {
        RelevanceScores::new(v.to_vec(), Source::Explained).unwrap()
    }

    #[test]
    fn prepare_label_masks_bottom_half_and_normalizes() {
        let (label, degenerate) = prepare_label(&scores(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!(!degenerate);
        assert_eq!(label.r_v, vec![0.0, 0.0, 3.0 / 7.0, 4.0 / 7.0]);
        assert_eq!(label.source, Source::Label);
    }

    #[test]
    fn prepare_label_clamps_negatives_first() {
        let (label, degenerate) = prepare_label(&scores(&[-1.0, 0.0, 2.0, 2.0])).unwrap();
        assert!(!degenerate);
        assert_eq!(label.r_v, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn prepare_label_breaks_ties_by_zeroing_lower_indices() {
        let (label, degenerate) = prepare_label(&scores(&[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(!degenerate);
        assert_eq!(label.r_v, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn prepare_label_all_nonpositive_is_degenerate_uniform() {
        let (label, degenerate) = prepare_label(&scores(&[-1.0, -2.0, 0.0, -0.5])).unwrap();
        assert!(degenerate);
        assert_eq!(label.r_v, vec![0.25; 4]);
    }

    #[test]
    fn prepare_label_odd_length_keeps_round_half_up_count() {
        // n=9: keep_count(0.5, 9) = 5, so 4 entries get zeroed.
        let (label, _) = prepare_label(&scores(&[9.0, 1.0, 8.0, 2.0, 7.0, 3.0, 6.0, 4.0, 5.0])).unwrap();
        assert_eq!(label.r_v.iter().filter(|&&v| v == 0.0).count(), 4);
        let sum: f64 = label.r_v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    fn uniform_trace(seq: usize, heads: usize) -> AttentionTrace<f64> {
        // Row i attends uniformly over 0..=i.
        let mut data = vec![0.0; seq * seq];
        for i in 0..seq {
            for j in 0..=i {
                data[i * seq + j] = 1.0 / (i + 1) as f64;
            }
        }
        let attn = Tensor::from_vec(vec![seq, seq], data).unwrap();
        AttentionTrace {
            step: 0,
            seq_len: seq,
            layers: vec![LayerAttention {
                heads: (0..heads)
                    .map(|_| HeadAttention { attn: attn.clone(), grad: Tensor::zeros(&[seq, seq]) })
                    .collect(),
            }],
        }
    }

    #[test]
    fn extract_a0v_is_the_row_mean_of_the_instruction_submap() {
        // N_s=1, N_v=3, N_u=2; hand-build a single-head trace.
        let mut data = vec![0.0; 36];
        // Row 4 (first instruction token): visual columns 1..4.
        data[4 * 6 + 1] = 0.2;
        data[4 * 6 + 2] = 0.3;
        data[4 * 6 + 3] = 0.5;
        // Row 5 (second instruction token).
        data[5 * 6 + 1] = 0.4;
        data[5 * 6 + 2] = 0.4;
        data[5 * 6 + 3] = 0.2;
        data[0] = 1.0; // keep other rows harmless
        for i in 1..4 {
            data[i * 6] = 1.0;
        }
        let attn = Tensor::from_vec(vec![6, 6], data).unwrap();
        let trace = AttentionTrace {
            step: 0,
            seq_len: 6,
            layers: vec![LayerAttention {
                heads: vec![HeadAttention { attn, grad: Tensor::zeros(&[6, 6]) }],
            }],
        };
        let layout = PromptLayout::new(1, 3, 2).unwrap();
        let a0v = extract_a0v(&trace, &layout).unwrap();
        let expect = [0.3f64, 0.35, 0.35];
        for (a, e) in a0v.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_a0v_single_instruction_row_passes_through() {
        let trace = uniform_trace(6, 1);
        let layout = PromptLayout::new(1, 4, 1).unwrap();
        let a0v = extract_a0v(&trace, &layout).unwrap();
        // The single instruction row is row 5: uniform 1/6 over visual cols.
        for v in a0v {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_a0v_head_mean_is_linear() {
        // Two identical heads give the same result as one.
        let one = extract_a0v(&uniform_trace(8, 1), &PromptLayout::new(2, 4, 2).unwrap()).unwrap();
        let two = extract_a0v(&uniform_trace(8, 2), &PromptLayout::new(2, 4, 2).unwrap()).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_a0v_rejects_short_traces() {
        let trace = uniform_trace(4, 1);
        let layout = PromptLayout::new(2, 4, 2).unwrap();
        assert!(extract_a0v(&trace, &layout).is_err());
    }

    #[test]
    fn kl_loss_examples() {
        let label = RelevanceScores::new(vec![0.0f64, 1.0], Source::Label).unwrap();
        let pred = RelevanceScores::new(vec![0.5f64, 0.5], Source::Predicted).unwrap();
        assert!((kl_loss(&label, &pred).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(kl_loss(&pred, &pred).unwrap(), 0.0);
    }

    #[test]
    fn pair_record_round_trips() {
        let ex = TrainingExample::<f32> {
            sample_id: 7,
            a0v: vec![0.1, 0.2, 0.3, 0.4],
            label: RelevanceScores::new(vec![0.0, 0.0, 0.5, 0.5], Source::Label).unwrap(),
            degenerate: false,
        };
        let rec = PairRecord::from_example(&ex);
        let mut buf = Vec::new();
        write_pairs_jsonl(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back = read_pairs_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec]);
        let ex2: TrainingExample<f32> = back[0].to_example().unwrap();
        assert_eq!(ex2.a0v, ex.a0v);
        assert_eq!(ex2.label.r_v, ex.label.r_v);
    }
}
