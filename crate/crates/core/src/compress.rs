//! Pruning plans over the visual span, and baselines for comparison.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::RelevanceScores;
use crate::numerics::Scalar;
use crate::toylm::{AttentionTrace, PromptLayout};

/// An ordered kept-index set realizing a retention ratio over the visual
/// span. Indices are 0-based within the span, strictly ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub kept: Vec<usize>,
    pub retention_ratio: f64,
}

impl CompressionPlan {
    pub fn contains(&self, index: usize) -> bool {
        self.kept.binary_search(&index).is_ok()
    }
}

/// Tokens kept for a ratio: round-half-up with a floor of one.
pub fn keep_count(ratio: f64, n_v: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArg(format!("retention ratio {ratio} outside (0, 1]")));
    }
    if n_v == 0 {
        return Err(Error::InvalidArg("empty visual span".to_string()));
    }
    let rounded = (ratio * n_v as f64 + 0.5).floor() as usize;
    Ok(rounded.max(1).min(n_v))
}

fn top_k_indices<F: Scalar>(scores: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Highest score first; ties keep the lower index.
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite scores").then(i.cmp(&j)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Keep the highest-scoring indices at the given ratio; ties keep the
/// lower index, and the kept list preserves original order.
pub fn topk_plan<F: Scalar>(r_v: &RelevanceScores<F>, ratio: f64) -> Result<CompressionPlan> {
    if r_v.is_empty() {
        return Err(Error::InvalidArg("empty relevance vector".to_string()));
    }
    if !r_v.r_v.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "topk_plan" });
    }
    let k = keep_count(ratio, r_v.len())?;
    Ok(CompressionPlan { kept: top_k_indices(&r_v.r_v, k), retention_ratio: ratio })
}

/// Filter the visual span of a prompt to the plan's kept indices; system
/// and instruction spans pass through untouched.
pub fn apply_plan(
    prompt: &[u32],
    layout: &PromptLayout,
    plan: &CompressionPlan,
) -> Result<(Vec<u32>, PromptLayout)> {
    if prompt.len() != layout.total() {
        return Err(Error::shape(
            "apply_plan",
            format!("prompt has {} tokens, layout expects {}", prompt.len(), layout.total()),
        ));
    }
    let mut last = None;
    for &i in &plan.kept {
        if i >= layout.n_vis {
            return Err(Error::InvalidArg(format!("kept index {i} outside visual span of {}", layout.n_vis)));
        }
        if let Some(prev) = last {
            if i <= prev {
                return Err(Error::InvalidArg("kept indices must be strictly ascending".to_string()));
            }
        }
        last = Some(i);
    }
    if plan.kept.is_empty() {
        return Err(Error::InvalidArg("plan keeps no visual tokens".to_string()));
    }
    let visual = &prompt[layout.visual_range()];
    let mut out = Vec::with_capacity(layout.n_sys + plan.kept.len() + layout.n_instr);
    out.extend_from_slice(&prompt[..layout.n_sys]);
    for &i in &plan.kept {
        out.push(visual[i]);
    }
    out.extend_from_slice(&prompt[layout.instruction_range()]);
    let new_layout = PromptLayout::new(layout.n_sys, plan.kept.len(), layout.n_instr)?;
    Ok((out, new_layout))
}

/// Uniform sample without replacement; deterministic per seed.
pub fn random_plan(seed: u64, n_v: usize, ratio: f64) -> Result<CompressionPlan> {
    let k = keep_count(ratio, n_v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = rand::seq::index::sample(&mut rng, n_v, k).into_vec();
    kept.sort_unstable();
    Ok(CompressionPlan { kept, retention_ratio: ratio })
}

/// Default scoring layer for the shallow-attention baseline: layer 4 capped
/// for small models (e.g. layer 2 of a 4-layer LM).
pub fn default_fastv_layer(n_layers: usize) -> usize {
    4.min(n_layers.saturating_sub(2))
}

/// Shallow-attention baseline: rank visual tokens by the attention they
/// receive from the final prompt position at layer `k` (head mean).
pub fn fastv_plan<F: Scalar>(
    trace: &AttentionTrace<F>,
    layout: &PromptLayout,
    ratio: f64,
    layer: Option<usize>,
) -> Result<CompressionPlan> {
    let k_layer = layer.unwrap_or_else(|| default_fastv_layer(trace.n_layers()));
    if k_layer >= trace.n_layers() {
        return Err(Error::InvalidArg(format!(
            "scoring layer {k_layer} out of range for {}-layer trace",
            trace.n_layers()
        )));
    }
    let s = trace.seq_len;
    if layout.n_sys + layout.n_vis > s {
        return Err(Error::shape(
            "fastv_plan",
            format!("layout needs {} positions, trace has {s}", layout.n_sys + layout.n_vis),
        ));
    }
    let heads = &trace.layers[k_layer].heads;
    let inv = F::from_f64_c(1.0 / heads.len() as f64);
    let mut scores = vec![F::zero(); layout.n_vis];
    for head in heads {
        let last = head.attn.row(s - 1);
        for (j, sc) in scores.iter_mut().enumerate() {
            *sc = *sc + last[layout.n_sys + j];
        }
    }
    for sc in scores.iter_mut() {
        *sc = *sc * inv;
    }
    let k = keep_count(ratio, layout.n_vis)?;
    Ok(CompressionPlan { kept: top_k_indices(&scores, k), retention_ratio: ratio })
}

/// Mean of per-benchmark score ratios, in percent.
pub fn preservation(compressed: &[f64], vanilla: &[f64]) -> Result<f64> {
    if compressed.len() != vanilla.len() || compressed.is_empty() {
        return Err(Error::InvalidArg(format!(
            "score lists must be nonempty and equal length ({} vs {})",
            compressed.len(),
            vanilla.len()
        )));
    }
    let mut acc = 0.0;
    for (&c, &v) in compressed.iter().zip(vanilla) {
        if v <= 0.0 {
            return Err(Error::InvalidArg(format!("vanilla score {v} must be positive")));
        }
        acc += c / v;
    }
    Ok(100.0 * acc / compressed.len() as f64)
}

// ── plan JSONL ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub sample_id: u64,
    pub ratio: f64,
    pub kept: Vec<usize>,
    pub method: String,
}

pub fn write_plans_jsonl<W: Write>(w: &mut W, records: &[PlanRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_plans_jsonl<R: BufRead>(r: R) -> Result<Vec<PlanRecord>> {
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
    use crate::explain::Source;

    fn scores(v: &[f32]) -> RelevanceScores<f32> {
        RelevanceScores::new(v.to_vec(), Source::Explained).unwrap()
    }

    #[test]
    fn keep_count_pins_the_rounding_rules() {
        assert_eq!(keep_count(0.5, 4).unwrap(), 2);
        assert_eq!(keep_count(0.25, 10).unwrap(), 3); // 2.5 rounds up
        assert_eq!(keep_count(0.1, 5).unwrap(), 1); // floored at one
        assert_eq!(keep_count(1.0, 7).unwrap(), 7);
        assert!(keep_count(0.0, 4).is_err());
        assert!(keep_count(1.5, 4).is_err());
    }

    #[test]
    fn topk_keeps_highest_scores_in_original_order() {
        let plan = topk_plan(&scores(&[0.1, 0.4, 0.2, 0.3]), 0.5).unwrap();
        assert_eq!(plan.kept, vec![1, 3]);
    }

    #[test]
    fn topk_full_ratio_keeps_everything() {
        let plan = topk_plan(&scores(&[0.5, 0.1, 0.9]), 1.0).unwrap();
        assert_eq!(plan.kept, vec![0, 1, 2]);
    }

    #[test]
    fn topk_ties_keep_lower_indices() {
        let plan = topk_plan(&scores(&[0.2, 0.2, 0.2, 0.2]), 0.5).unwrap();
        assert_eq!(plan.kept, vec![0, 1]);
    }

    #[test]
    fn apply_plan_filters_only_the_visual_span() {
        let layout = PromptLayout::new(2, 4, 3).unwrap();
        let prompt = vec![90, 90, 10, 11, 12, 13, 80, 81, 82];
        let plan = CompressionPlan { kept: vec![1, 3], retention_ratio: 0.5 };
        let (pruned, new_layout) = apply_plan(&prompt, &layout, &plan).unwrap();
        assert_eq!(pruned, vec![90, 90, 11, 13, 80, 81, 82]);
        assert_eq!(new_layout, PromptLayout::new(2, 2, 3).unwrap());
    }

    #[test]
    fn apply_full_plan_is_identity() {
        let layout = PromptLayout::new(1, 3, 2).unwrap();
        let prompt = vec![9, 1, 2, 3, 7, 8];
        let plan = CompressionPlan { kept: vec![0, 1, 2], retention_ratio: 1.0 };
        let (pruned, new_layout) = apply_plan(&prompt, &layout, &plan).unwrap();
        assert_eq!(pruned, prompt);
        assert_eq!(new_layout, layout);
    }

    #[test]
    fn apply_plan_rejects_out_of_range_indices() {
        let layout = PromptLayout::new(1, 3, 2).unwrap();
        let prompt = vec![9, 1, 2, 3, 7, 8];
        let plan = CompressionPlan { kept: vec![0, 5], retention_ratio: 0.5 };
        assert!(apply_plan(&prompt, &layout, &plan).is_err());
    }

    #[test]
    fn random_plan_is_deterministic_and_full_at_ratio_one() {
        let a = random_plan(33, 16, 0.5).unwrap();
        let b = random_plan(33, 16, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kept.len(), 8);
        let full = random_plan(33, 5, 1.0).unwrap();
        assert_eq!(full.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_plan_keeps_each_index_about_half_the_time() {
        let mut counts = [0usize; 16];
        let draws = 10_000;
        for seed in 0..draws {
            for &i in &random_plan(seed, 16, 0.5).unwrap().kept {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let frac = c as f64 / draws as f64;
            assert!((frac - 0.5).abs() < 0.03, "index {i} kept at rate {frac}");
        }
    }

    #[test]
    fn default_fastv_layer_caps_for_small_models() {
        assert_eq!(default_fastv_layer(4), 2);
        assert_eq!(default_fastv_layer(32), 4);
        assert_eq!(default_fastv_layer(6), 4);
        assert_eq!(default_fastv_layer(2), 0);
    }

    #[test]
    fn preservation_matches_definition() {
        assert_eq!(preservation(&[50.0], &[100.0]).unwrap(), 50.0);
        assert_eq!(preservation(&[90.0, 110.0], &[100.0, 100.0]).unwrap(), 100.0);
        let same = preservation(&[12.5, 80.0], &[12.5, 80.0]).unwrap();
        assert!((same - 100.0).abs() < 1e-12);
        assert!(preservation(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn monotonic_ratios_nest() {
        let r = scores(&[0.7, 0.1, 0.9, 0.3, 0.5, 0.2, 0.8, 0.4]);
        let big = topk_plan(&r, 0.75).unwrap();
        let small = topk_plan(&r, 0.25).unwrap();
        for i in &small.kept {
            assert!(big.kept.contains(i));
        }
    }
}
