//! Building (probe, label) pairs from a trained LM, and fitting the
//! compressor with Adam on the KL objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::net::{build_compressor_forward, CompressorParams};
use super::{extract_a0v, prepare_label, CompressorConfig, TrainingExample};
use crate::error::{Error, Result};
use crate::explain::{extract_visual_slice, propagate_step, AggregationStrategy, RelevanceScores, Source};
use crate::numerics::{adam_step_slices, ops, AdamState, Graph, Scalar, Tensor};
use crate::toylm::{answer_argmax, capture_step, infer_vocab, EncodedSample, LmParams};

/// Build training pairs: answer each sample, keep only correct ones,
/// capture the answer step, and derive the probe and the masked label
/// from the same trace.
pub fn build_dataset<F: Scalar>(
    lm: &LmParams<F>,
    samples: &[EncodedSample],
    strategy: AggregationStrategy,
    clamp: bool,
) -> Result<Vec<TrainingExample<F>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no samples to build pairs from".to_string()));
    }
    let vocab = infer_vocab(&samples[0])?;
    let pairs: Result<Vec<Option<TrainingExample<F>>>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let prompt = sample.prompt();
            let layout = sample.layout()?;
            let predicted = answer_argmax(lm, &prompt, vocab.n_symbols)?;
            if predicted != sample.answer_token() {
                return Ok(None);
            }
            let mut full = prompt.clone();
            full.push(predicted);
            let cap = capture_step(lm, &full, prompt.len(), 0)?;
            let a0v = extract_a0v(&cap.trace, &layout)?;
            let rel = propagate_step(&cap.trace, strategy, clamp)?;
            let slice = extract_visual_slice(&rel, &layout)?;
            let explained = RelevanceScores::new(slice, Source::Explained)?;
            let (label, degenerate) = prepare_label(&explained)?;
            Ok(Some(TrainingExample { sample_id: idx as u64, a0v, label, degenerate }))
        })
        .collect();
    Ok(pairs?.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug)]
pub struct CompressorTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of (non-degenerate) pairs held out for evaluation.
    pub holdout_frac: f64,
}

impl Default for CompressorTrainOptions {
    fn default() -> Self {
        CompressorTrainOptions { epochs: 100, batch_size: 128, lr: 1e-3, seed: 0, holdout_frac: 0.1 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CompressorReport {
    /// Mean training KL per epoch.
    pub train_curve: Vec<f64>,
    /// Mean held-out KL per epoch.
    pub val_curve: Vec<f64>,
    /// Held-out mean KL of the returned parameters.
    pub heldout_kl: f64,
    /// Held-out mean KL of the uniform predictor, the floor to beat.
    pub uniform_kl: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

fn example_grads<F: Scalar>(
    params: &CompressorParams<F>,
    ex: &TrainingExample<F>,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut graph = Graph::new();
    let pass = build_compressor_forward(&mut graph, params, &ex.a0v)?;
    let label = Tensor::from_vec(vec![1, ex.label.len()], ex.label.r_v.clone())?;
    let loss = graph.kl_div(label, pass.output)?;
    let loss_value = graph.value(loss).data()[0].as_f64();
    let mut grads = graph.backward(loss)?;
    Ok((loss_value, pass.param_ids.iter().map(|&id| grads.take(id)).collect()))
}

fn mean_kl<F: Scalar>(params: &CompressorParams<F>, set: &[&TrainingExample<F>]) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let totals: Result<Vec<f64>> = set
        .par_iter()
        .map(|ex| {
            let pred = super::predict(params, &ex.a0v)?;
            Ok(ops::kl_div(&ex.label.r_v, &pred.r_v)?.as_f64())
        })
        .collect();
    let totals = totals?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

fn uniform_kl<F: Scalar>(set: &[&TrainingExample<F>]) -> f64 {
    // KL(label ‖ uniform_n) = Σ l_i ln l_i + ln n, in closed form.
    let mut acc = 0.0;
    for ex in set {
        let n = ex.label.len() as f64;
        let entropy_term: f64 = ex
            .label
            .r_v
            .iter()
            .map(|v| {
                let p = v.as_f64();
                if p > 0.0 {
                    p * p.ln()
                } else {
                    0.0
                }
            })
            .sum();
        acc += entropy_term + n.ln();
    }
    if set.is_empty() {
        f64::NAN
    } else {
        acc / set.len() as f64
    }
}

/// Train the compressor on (probe, label) pairs; deterministic per seed.
/// Degenerate pairs are excluded. Batches are bucketed by input length so
/// mixed-length datasets train without padding.
pub fn train_compressor<F: Scalar>(
    config: CompressorConfig,
    dataset: &[TrainingExample<F>],
    opts: CompressorTrainOptions,
) -> Result<(CompressorParams<F>, CompressorReport)> {
    config.validate()?;
    let usable: Vec<&TrainingExample<F>> = dataset.iter().filter(|ex| !ex.degenerate).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArg("no usable (non-degenerate) training pairs".to_string()));
    }
    if !(0.0..1.0).contains(&opts.holdout_frac) {
        return Err(Error::InvalidArg(format!("holdout fraction {} outside [0, 1)", opts.holdout_frac)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_heldout = (usable.len() as f64 * opts.holdout_frac).round() as usize;
    let n_train = usable.len() - n_heldout;
    let train_set: Vec<&TrainingExample<F>> = order[..n_train].iter().map(|&i| usable[i]).collect();
    let heldout_set: Vec<&TrainingExample<F>> = order[n_train..].iter().map(|&i| usable[i]).collect();
    let eval_set: &[&TrainingExample<F>] = if heldout_set.is_empty() { &train_set } else { &heldout_set };

    // Bucket by probe length; each batch is drawn within one bucket.
    let mut buckets: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, ex) in train_set.iter().enumerate() {
        match buckets.iter_mut().find(|(len, _)| *len == ex.len()) {
            Some((_, v)) => v.push(i),
            None => buckets.push((ex.len(), vec![i])),
        }
    }
    buckets.sort_by_key(|(len, _)| *len);

    let mut params = CompressorParams::<F>::init(config, opts.seed)?;
    let flat_count = params.tensors().len();
    let mut state = {
        let shapes: Vec<Tensor<F>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState::new(&shapes)
    };
    let mut report = CompressorReport {
        n_train,
        n_heldout: heldout_set.len(),
        uniform_kl: uniform_kl(eval_set),
        ..CompressorReport::default()
    };
    let mut global_step: u64 = 0;

    for _epoch in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_examples = 0usize;
        for bucket in &mut buckets {
            let idxs = &mut bucket.1;
            for i in (1..idxs.len()).rev() {
                idxs.swap(i, rng.gen_range(0..=i));
            }
            for chunk in idxs.chunks(opts.batch_size.max(1)) {
                let results: Result<Vec<(f64, Vec<Tensor<F>>)>> =
                    chunk.par_iter().map(|&i| example_grads(&params, train_set[i])).collect();
                let results = match results {
                    Ok(r) => r,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Divergence { seed: opts.seed, step: global_step })
                    }
                    Err(e) => return Err(e),
                };
                let mut acc: Vec<Tensor<F>> =
                    params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
                debug_assert_eq!(acc.len(), flat_count);
                let mut batch_loss = 0.0;
                for (loss, grads) in &results {
                    batch_loss += loss;
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.add_assign(g)?;
                    }
                }
                let inv = F::from_f64_c(1.0 / results.len() as f64);
                for a in acc.iter_mut() {
                    a.scale_assign(inv);
                }
                batch_loss /= results.len() as f64;
                if !batch_loss.is_finite() {
                    return Err(Error::Divergence { seed: opts.seed, step: global_step });
                }
                adam_step_slices(&mut params.tensors_mut(), &acc, &mut state, opts.lr).map_err(
                    |e| match e {
                        Error::NonFinite { .. } => Error::Divergence { seed: opts.seed, step: global_step },
                        other => other,
                    },
                )?;
                global_step += 1;
                epoch_loss += batch_loss * results.len() as f64;
                epoch_examples += results.len();
            }
        }
        report.train_curve.push(epoch_loss / epoch_examples.max(1) as f64);
        report.val_curve.push(mean_kl(&params, eval_set)?);
    }

    report.heldout_kl = match report.val_curve.last() {
        Some(&v) => v,
        None => mean_kl(&params, eval_set)?,
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_pairs(n: usize, len: usize, seed: u64) -> Vec<TrainingExample<f32>> {
        // Probe: a bump at a random cell; label: top half around the bump.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let peak = rng.gen_range(0..len);
                let a0v: Vec<f32> = (0..len)
                    .map(|j| {
                        let d = (j as f64 - peak as f64).abs();
                        (0.05 + (-d).exp()) as f32
                    })
                    .collect();
                let explained = RelevanceScores::new(a0v.clone(), Source::Explained).unwrap();
                let (label, degenerate) = prepare_label(&explained).unwrap();
                TrainingExample { sample_id: i as u64, a0v, label, degenerate }
            })
            .collect()
    }

    fn tiny_config() -> CompressorConfig {
        CompressorConfig { n_layers: 2, kernel: 3, channels: vec![4, 8] }
    }

    #[test]
    fn zero_init_loss_is_uniform_kl() {
        let pairs = synthetic_pairs(32, 8, 3);
        let params = CompressorParams::<f32>::zeros(tiny_config()).unwrap();
        let refs: Vec<&TrainingExample<f32>> = pairs.iter().collect();
        let model_kl = mean_kl(&params, &refs).unwrap();
        let closed_form = uniform_kl(&refs);
        assert!(
            (model_kl - closed_form).abs() < 1e-3,
            "zero-init KL {model_kl} vs closed form {closed_form}"
        );
    }

    #[test]
    fn training_reduces_kl_below_uniform() {
        let pairs = synthetic_pairs(128, 8, 5);
        let opts = CompressorTrainOptions { epochs: 20, batch_size: 32, seed: 1, ..Default::default() };
        let (_, report) = train_compressor(tiny_config(), &pairs, opts).unwrap();
        assert!(
            report.heldout_kl < report.uniform_kl,
            "held-out KL {} should undercut uniform {}",
            report.heldout_kl,
            report.uniform_kl
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let pairs = synthetic_pairs(48, 6, 7);
        let opts = CompressorTrainOptions { epochs: 2, batch_size: 16, seed: 11, ..Default::default() };
        let (a, _) = train_compressor(tiny_config(), &pairs, opts).unwrap();
        let (b, _) = train_compressor(tiny_config(), &pairs, opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_pairs_are_excluded() {
        let mut pairs = synthetic_pairs(20, 6, 9);
        for p in pairs.iter_mut() {
            p.degenerate = true;
        }
        let opts = CompressorTrainOptions { epochs: 1, ..Default::default() };
        assert!(train_compressor(tiny_config(), &pairs, opts).is_err());
    }

    #[test]
    fn mixed_lengths_train_via_buckets() {
        let mut pairs = synthetic_pairs(24, 6, 13);
        pairs.extend(synthetic_pairs(24, 9, 14));
        let opts =
            CompressorTrainOptions { epochs: 1, batch_size: 8, holdout_frac: 0.0, ..Default::default() };
        let (params, report) = train_compressor(tiny_config(), &pairs, opts).unwrap();
        assert_eq!(report.n_train, 48);
        // One parameter set serves both lengths.
        assert_eq!(super::super::predict(&params, &pairs[0].a0v).unwrap().len(), 6);
        assert_eq!(super::super::predict(&params, &pairs[47].a0v).unwrap().len(), 9);
    }
}
