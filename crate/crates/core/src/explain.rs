//! Relevance propagation over captured attention.
//!
//! Per generation step, a square relevance map starts as the identity and
//! is updated layer by layer with the head-averaged, gradient-weighted
//! attention: `R <- R + E_h(A ⊙ ∇A) · R`. The visual slice of the last row,
//! averaged over steps, yields the per-visual-token scores used for
//! pruning.

use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Scalar, Tensor};
use crate::toylm::{capture_step, AttentionTrace, LmParams, PromptLayout};

/// How per-head attention is aggregated into a layer update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    /// Head mean of `A ⊙ ∇A`.
    #[serde(rename = "grad")]
    GradWeighted,
    /// Head mean of `A` alone.
    #[serde(rename = "mean")]
    MeanWeighted,
}

impl AggregationStrategy {
    pub fn tag(self) -> &'static str {
        match self {
            AggregationStrategy::GradWeighted => "grad",
            AggregationStrategy::MeanWeighted => "mean",
        }
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(AggregationStrategy::GradWeighted),
            "mean" => Ok(AggregationStrategy::MeanWeighted),
            other => Err(Error::InvalidArg(format!("unknown strategy `{other}` (grad|mean)"))),
        }
    }
}

/// Where a relevance vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Explained,
    Predicted,
    Label,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Explained => "explained",
            Source::Predicted => "predicted",
            Source::Label => "label",
        }
    }
}

/// Per-visual-token relevance scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores<F: Scalar> {
    pub r_v: Vec<F>,
    pub source: Source,
}

impl<F: Scalar> RelevanceScores<F> {
    pub fn new(r_v: Vec<F>, source: Source) -> Result<Self> {
        if r_v.is_empty() {
            return Err(Error::InvalidArg("relevance vector must be nonempty".to_string()));
        }
        if !r_v.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "relevance_scores" });
        }
        Ok(RelevanceScores { r_v, source })
    }

    pub fn len(&self) -> usize {
        self.r_v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_v.is_empty()
    }
}

/// The square relevance map for one generation step.
#[derive(Clone, Debug)]
pub struct StepRelevance<F: Scalar> {
    pub map: Tensor<F>,
}

fn head_mean<F: Scalar>(
    trace: &AttentionTrace<F>,
    layer: usize,
    strategy: AggregationStrategy,
    clamp: bool,
) -> Result<Tensor<F>> {
    let heads = &trace.layers[layer].heads;
    if heads.is_empty() {
        return Err(Error::shape("propagate_step", format!("layer {layer} has no heads")));
    }
    let s = trace.seq_len;
    let mut acc = Tensor::zeros(&[s, s]);
    for head in heads {
        if head.attn.shape() != [s, s] || head.grad.shape() != [s, s] {
            return Err(Error::shape(
                "propagate_step",
                format!("layer {layer}: head matrices must be [{s},{s}]"),
            ));
        }
        let mut term = match strategy {
            AggregationStrategy::GradWeighted => ops::mul(&head.attn, &head.grad)?,
            AggregationStrategy::MeanWeighted => head.attn.clone(),
        };
        if clamp {
            term = ops::relu(&term);
        }
        acc.add_assign(&term)?;
    }
    acc.scale_assign(F::from_f64_c(1.0 / heads.len() as f64));
    Ok(acc)
}

/// Propagate relevance across layers in ascending order:
/// `R` starts as the identity and each layer applies `R <- R + M_l · R`.
/// `clamp` zeroes negative entries of each head's `A ⊙ ∇A` term before
/// averaging; the default pipeline leaves values unclamped.
pub fn propagate_step<F: Scalar>(
    trace: &AttentionTrace<F>,
    strategy: AggregationStrategy,
    clamp: bool,
) -> Result<StepRelevance<F>> {
    let s = trace.seq_len;
    if s == 0 {
        return Err(Error::InvalidArg("empty trace".to_string()));
    }
    let n_heads = trace.n_heads();
    let mut map = identity(s);
    for layer in 0..trace.n_layers() {
        if trace.layers[layer].heads.len() != n_heads {
            return Err(Error::shape(
                "propagate_step",
                format!("layer {layer} has {} heads, expected {n_heads}", trace.layers[layer].heads.len()),
            ));
        }
        let m = head_mean(trace, layer, strategy, clamp)?;
        let update = ops::matmul(&m, &map)?;
        map = ops::add(&map, &update)?;
    }
    Ok(StepRelevance { map })
}

fn identity<F: Scalar>(s: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[s, s]);
    for i in 0..s {
        t.data_mut()[i * s + i] = F::one();
    }
    t
}

/// Visual slice of the last row: `R[last, N_s .. N_s + N_v]`.
pub fn extract_visual_slice<F: Scalar>(rel: &StepRelevance<F>, layout: &PromptLayout) -> Result<Vec<F>> {
    let s = rel.map.shape()[0];
    if layout.n_sys + layout.n_vis > s {
        return Err(Error::shape(
            "extract_visual_slice",
            format!("layout needs {} columns, map has {s}", layout.n_sys + layout.n_vis),
        ));
    }
    let last = rel.map.row(s - 1);
    Ok(last[layout.visual_range()].to_vec())
}

/// Full explained relevance for a response: capture, propagate, slice per
/// step, then average over steps.
pub fn relevance<F: Scalar>(
    params: &LmParams<F>,
    prompt: &[u32],
    response: &[u32],
    layout: &PromptLayout,
    strategy: AggregationStrategy,
    clamp: bool,
) -> Result<RelevanceScores<F>> {
    if response.is_empty() {
        return Err(Error::InvalidArg("relevance over an empty response".to_string()));
    }
    let mut full = prompt.to_vec();
    full.extend_from_slice(response);
    let mut acc = vec![F::zero(); layout.n_vis];
    for t in 0..response.len() {
        let cap = capture_step(params, &full, prompt.len(), t)?;
        let rel = propagate_step(&cap.trace, strategy, clamp)?;
        let slice = extract_visual_slice(&rel, layout)?;
        for (a, v) in acc.iter_mut().zip(&slice) {
            *a = *a + *v;
        }
    }
    let inv = F::from_f64_c(1.0 / response.len() as f64);
    for a in acc.iter_mut() {
        *a = *a * inv;
    }
    RelevanceScores::new(acc, Source::Explained)
}

// ── relevance JSONL and heatmap CSV ──────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub sample_id: u64,
    pub n_v: usize,
    pub r_v: Vec<f32>,
    pub strategy: String,
    pub source: String,
}

impl RelevanceRecord {
    pub fn new<F: Scalar>(sample_id: u64, scores: &RelevanceScores<F>, strategy: AggregationStrategy) -> Self {
        RelevanceRecord {
            sample_id,
            n_v: scores.len(),
            r_v: scores.r_v.iter().map(|v| v.as_f32()).collect(),
            strategy: strategy.tag().to_string(),
            source: scores.source.tag().to_string(),
        }
    }
}

pub fn write_relevance_jsonl<W: Write>(w: &mut W, records: &[RelevanceRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_relevance_jsonl<R: BufRead>(r: R) -> Result<Vec<RelevanceRecord>> {
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

/// CSV grid of relevance scores reshaped to `g x g`.
pub fn write_heatmap_csv<F: Scalar, W: Write>(w: &mut W, r_v: &[F], grid_size: usize) -> Result<()> {
    if r_v.len() != grid_size * grid_size {
        return Err(Error::shape(
            "heatmap",
            format!("{} scores do not fill a {grid_size}x{grid_size} grid", r_v.len()),
        ));
    }
    for row in r_v.chunks(grid_size) {
        let line: Vec<String> = row.iter().map(|v| v.as_f32().to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::{HeadAttention, LayerAttention};

    /// Lower-triangular row-stochastic matrix from raw rows.
    fn tri(s: usize, rows: &[&[f64]]) -> Tensor<f64> {
        let mut data = vec![0.0; s * s];
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                data[i * s + j] = *v;
            }
        }
        Tensor::from_vec(vec![s, s], data).unwrap()
    }

    fn trace_of(attn: Vec<Tensor<f64>>, grad: Vec<Tensor<f64>>) -> AttentionTrace<f64> {
        let s = attn[0].shape()[0];
        let layers = attn
            .into_iter()
            .zip(grad)
            .map(|(a, g)| LayerAttention { heads: vec![HeadAttention { attn: a, grad: g }] })
            .collect();
        AttentionTrace { step: 0, seq_len: s, layers }
    }

    #[test]
    fn zero_gradients_leave_identity() {
        let a = tri(3, &[&[1.0], &[0.5, 0.5], &[0.2, 0.3, 0.5]]);
        let g = Tensor::zeros(&[3, 3]);
        let trace = trace_of(vec![a], vec![g]);
        let rel = propagate_step(&trace, AggregationStrategy::GradWeighted, false).unwrap();
        let expect = identity::<f64>(3);
        assert_eq!(rel.map, expect);
    }

    #[test]
    fn single_layer_is_identity_plus_update() {
        let a = tri(2, &[&[1.0], &[0.5, 0.5]]);
        let g = tri(2, &[&[2.0], &[4.0, -2.0]]);
        let trace = trace_of(vec![a.clone()], vec![g.clone()]);
        let rel = propagate_step(&trace, AggregationStrategy::GradWeighted, false).unwrap();
        // I + A ⊙ ∇A for a single head and layer.
        let m = ops::mul(&a, &g).unwrap();
        let expect = ops::add(&identity::<f64>(2), &m).unwrap();
        assert_eq!(rel.map, expect);
    }

    #[test]
    fn grad_weighted_equals_mean_weighted_on_all_ones_gradients() {
        let a = tri(3, &[&[1.0], &[0.25, 0.75], &[0.1, 0.6, 0.3]]);
        let ones = tri(3, &[&[1.0], &[1.0, 1.0], &[1.0, 1.0, 1.0]]);
        let trace = trace_of(vec![a.clone(), a], vec![ones.clone(), ones]);
        let gw = propagate_step(&trace, AggregationStrategy::GradWeighted, false).unwrap();
        let mw = propagate_step(&trace, AggregationStrategy::MeanWeighted, false).unwrap();
        assert_eq!(gw.map, mw.map);
    }

    #[test]
    fn visual_slice_of_identity_is_zero_off_diagonal() {
        let rel = StepRelevance { map: identity::<f64>(8) };
        let layout = PromptLayout::new(2, 4, 2).unwrap();
        // Last row index 7 is outside the visual span 2..6.
        assert_eq!(extract_visual_slice(&rel, &layout).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn visual_slice_uses_layout_columns() {
        let s = 14;
        let mut map = Tensor::<f64>::zeros(&[s, s]);
        for j in 0..s {
            map.data_mut()[(s - 1) * s + j] = j as f64;
        }
        let layout = PromptLayout::new(4, 9, 1).unwrap();
        let slice = extract_visual_slice(&StepRelevance { map }, &layout).unwrap();
        assert_eq!(slice, (4..13).map(|j| j as f64).collect::<Vec<_>>());
    }

    #[test]
    fn slice_too_wide_for_map_is_rejected() {
        let rel = StepRelevance { map: identity::<f64>(4) };
        let layout = PromptLayout::new(2, 4, 1).unwrap();
        assert!(extract_visual_slice(&rel, &layout).is_err());
    }

    #[test]
    fn strategy_labels_round_trip() {
        for s in [AggregationStrategy::GradWeighted, AggregationStrategy::MeanWeighted] {
            assert_eq!(s.tag().parse::<AggregationStrategy>().unwrap(), s);
        }
        assert!("other".parse::<AggregationStrategy>().is_err());
    }

    #[test]
    fn heatmap_is_a_g_by_g_grid() {
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &[1.0f32, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,2\n3,4\n");
    }
}
