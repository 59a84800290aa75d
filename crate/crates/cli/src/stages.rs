//! Pipeline stages. Each stage reads its upstream artifacts from the
//! output directory, writes its own through atomic renames, and is a pure
//! function of (config, seed, upstream artifacts).

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use relprune::compress::{
    apply_plan, fastv_plan, preservation, random_plan, topk_plan, CompressionPlan, PlanRecord,
};
use relprune::compressor::{
    build_dataset, predict, prepare_label, read_compressor, train_compressor, write_compressor,
    CompressorParams, CompressorReport, PairRecord,
};
use relprune::explain::{
    relevance, write_heatmap_csv, write_relevance_jsonl, AggregationStrategy, RelevanceRecord,
    RelevanceScores, Source,
};
use relprune::toylm::{
    answer_argmax, capture_prompt, capture_step, generate, read_dataset, read_lm, train_lm,
    write_dataset, write_lm, write_traces, EncodedSample, LmParams, TrainReport,
};

use crate::artifacts::{write_atomic, write_manifest};
use crate::config::{ExperimentConfig, Method};
use crate::results::{write_results_csv, write_results_markdown, ResultRow};

pub const F_TRAIN: &str = "dataset_train.jsonl";
pub const F_HELDOUT: &str = "dataset_heldout.jsonl";
pub const F_PAIR_SOURCE: &str = "dataset_pairs.jsonl";
pub const F_LM: &str = "lm.bin";
pub const F_LM_CURVE: &str = "lm_curve.csv";
pub const F_PAIRS: &str = "pairs.jsonl";
pub const F_COMPRESSOR: &str = "ftheta.bin";
pub const F_COMPRESSOR_CURVE: &str = "compressor_curve.csv";
pub const F_PLANS: &str = "plans.jsonl";
pub const F_RESULTS: &str = "results.csv";
pub const F_RESULTS_MD: &str = "results.md";

pub fn relevance_file(strategy: AggregationStrategy) -> String {
    format!("relevance_{}.jsonl", strategy.tag())
}

/// Run `f` inside a rayon pool with the configured worker count.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if jobs > 0 {
        builder = builder.num_threads(jobs);
    }
    let pool = builder.build().context("building worker pool")?;
    pool.install(f)
}

fn read_samples(path: &Path) -> Result<Vec<EncodedSample>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(BufReader::new(file)).map_err(|e| anyhow!("{e}: {}", path.display()))
}

pub fn load_lm(out_dir: &Path) -> Result<LmParams<f32>> {
    let path = out_dir.join(F_LM);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    read_lm(&mut BufReader::new(file)).map_err(|e| anyhow!("{e}: {}", path.display()))
}

pub fn load_compressor(out_dir: &Path) -> Result<CompressorParams<f32>> {
    let path = out_dir.join(F_COMPRESSOR);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    read_compressor(&mut BufReader::new(file)).map_err(|e| anyhow!("{e}: {}", path.display()))
}

// ── gen-data ─────────────────────────────────────────────────────────

/// One generated stream split into three disjoint files: LM training,
/// held-out evaluation, and the pair-builder source.
pub fn stage_gen_data(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let total = config.n_train_lm + config.n_heldout + config.n_pair_source;
    let samples = relprune::toylm::gen_encoded(config.seed, config.grid_size, config.n_symbols, total)
        .map_err(|e| anyhow!("{e}"))?;
    let (train, rest) = samples.split_at(config.n_train_lm);
    let (heldout, pair_source) = rest.split_at(config.n_heldout);
    for (name, part) in [(F_TRAIN, train), (F_HELDOUT, heldout), (F_PAIR_SOURCE, pair_source)] {
        write_atomic(&out_dir.join(name), |w| {
            write_dataset(w, part).map_err(|e| anyhow!("{e}"))
        })?;
    }
    Ok(())
}

// ── train-lm ─────────────────────────────────────────────────────────

pub fn stage_train_lm(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainReport> {
    let train = read_samples(&out_dir.join(F_TRAIN))?;
    let heldout = read_samples(&out_dir.join(F_HELDOUT))?;
    let (params, report) =
        train_lm::<f32>(config.lm_config(), &train, &heldout, config.lm_train_options())
            .map_err(|e| anyhow!("{e}"))?;
    write_atomic(&out_dir.join(F_LM), |w| write_lm(w, &params).map_err(|e| anyhow!("{e}")))?;
    write_atomic(&out_dir.join(F_LM_CURVE), |w| {
        writeln!(w, "epoch,train_loss,heldout_accuracy")?;
        for (i, loss) in report.loss_curve.iter().enumerate() {
            let acc = report.accuracy_curve.get(i).copied().unwrap_or(f64::NAN);
            writeln!(w, "{},{:.6},{:.6}", i + 1, loss, acc)?;
        }
        Ok(())
    })?;
    Ok(report)
}

// ── explain ──────────────────────────────────────────────────────────

fn explained_scores(
    lm: &LmParams<f32>,
    sample: &EncodedSample,
    strategy: AggregationStrategy,
    clamp: bool,
) -> Result<RelevanceScores<f32>> {
    let prompt = sample.prompt();
    let layout = sample.layout().map_err(|e| anyhow!("{e}"))?;
    let response = generate(lm, &prompt, 1).map_err(|e| anyhow!("{e}"))?;
    relevance(lm, &prompt, &response, &layout, strategy, clamp).map_err(|e| anyhow!("{e}"))
}

/// Explained relevance for the evaluation slice of the held-out set.
pub fn stage_explain(
    config: &ExperimentConfig,
    out_dir: &Path,
    heatmap_out: Option<&Path>,
    trace_out: Option<&Path>,
) -> Result<usize> {
    use rayon::prelude::*;
    let lm = load_lm(out_dir)?;
    let heldout = read_samples(&out_dir.join(F_HELDOUT))?;
    let slice = heldout
        .get(..config.eval_samples)
        .ok_or_else(|| anyhow!("held-out set smaller than eval_samples"))?;

    let records: Result<Vec<RelevanceRecord>> = slice
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let scores = explained_scores(&lm, sample, config.strategy, config.clamp)?;
            Ok(RelevanceRecord::new(i as u64, &scores, config.strategy))
        })
        .collect();
    let records = records?;

    write_atomic(&out_dir.join(relevance_file(config.strategy)), |w| {
        write_relevance_jsonl(w, &records).map_err(|e| anyhow!("{e}"))
    })?;

    if let Some(dir) = heatmap_out {
        for record in records.iter().take(8) {
            let path = dir.join(format!("heatmap_{}.csv", record.sample_id));
            let grid = config.grid_size;
            let r_v = record.r_v.clone();
            write_atomic(&path, move |w| {
                write_heatmap_csv(w, &r_v, grid).map_err(|e| anyhow!("{e}"))
            })?;
        }
    }

    if let Some(path) = trace_out {
        let sample = &slice[0];
        let prompt = sample.prompt();
        let response = generate(&lm, &prompt, 1).map_err(|e| anyhow!("{e}"))?;
        let mut full = prompt.clone();
        full.extend_from_slice(&response);
        let mut traces = Vec::new();
        for t in 0..response.len() {
            traces.push(capture_step(&lm, &full, prompt.len(), t).map_err(|e| anyhow!("{e}"))?.trace);
        }
        write_atomic(path, |w| write_traces(w, &traces).map_err(|e| anyhow!("{e}")))?;
    }
    Ok(records.len())
}

// ── build-pairs ──────────────────────────────────────────────────────

pub fn stage_build_pairs(config: &ExperimentConfig, out_dir: &Path) -> Result<usize> {
    let lm = load_lm(out_dir)?;
    let source = read_samples(&out_dir.join(F_PAIR_SOURCE))?;
    let pairs =
        build_dataset(&lm, &source, config.strategy, config.clamp).map_err(|e| anyhow!("{e}"))?;
    if pairs.is_empty() {
        eprintln!("build-pairs: the model answered no sample correctly; wrote an empty pair set");
    }
    let records: Vec<PairRecord> = pairs.iter().map(PairRecord::from_example).collect();
    write_atomic(&out_dir.join(F_PAIRS), |w| {
        relprune::compressor::write_pairs_jsonl(w, &records).map_err(|e| anyhow!("{e}"))
    })?;
    Ok(records.len())
}

// ── train-compressor ─────────────────────────────────────────────────

pub fn stage_train_compressor(config: &ExperimentConfig, out_dir: &Path) -> Result<CompressorReport> {
    let path = out_dir.join(F_PAIRS);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let records = relprune::compressor::read_pairs_jsonl(BufReader::new(file)).map_err(|e| anyhow!("{e}"))?;
    let pairs: Vec<_> = records
        .iter()
        .map(|r| r.to_example::<f32>())
        .collect::<relprune::Result<_>>()
        .map_err(|e| anyhow!("{e}"))?;
    let (params, report) =
        train_compressor(config.compressor_config(), &pairs, config.compressor_train_options())
            .map_err(|e| anyhow!("{e}"))?;
    write_atomic(&out_dir.join(F_COMPRESSOR), |w| {
        write_compressor(w, &params).map_err(|e| anyhow!("{e}"))
    })?;
    write_atomic(&out_dir.join(F_COMPRESSOR_CURVE), |w| {
        writeln!(w, "epoch,train_kl,heldout_kl")?;
        for (i, (t, v)) in report.train_curve.iter().zip(&report.val_curve).enumerate() {
            writeln!(w, "{},{:.6},{:.6}", i + 1, t, v)?;
        }
        Ok(())
    })?;
    Ok(report)
}

// ── eval ─────────────────────────────────────────────────────────────

struct CellOutcome {
    method: Method,
    ratio: f64,
    correct: bool,
    oracle_hit: bool,
    kl: Option<f64>,
    kept: Vec<usize>,
}

struct SampleOutcome {
    vanilla_correct: bool,
    cells: Vec<CellOutcome>,
}

fn plan_seed(seed: u64, sample_id: u64, ratio_idx: usize) -> u64 {
    seed ^ sample_id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((ratio_idx as u64) << 56)
}

#[allow(clippy::too_many_arguments)]
fn eval_sample(
    config: &ExperimentConfig,
    lm: &LmParams<f32>,
    compressor: Option<&CompressorParams<f32>>,
    explained: Option<&RelevanceScores<f32>>,
    methods: &[Method],
    ratios: &[f64],
    sample_id: u64,
    sample: &EncodedSample,
) -> Result<SampleOutcome> {
    let prompt = sample.prompt();
    let layout = sample.layout().map_err(|e| anyhow!("{e}"))?;
    let n_symbols = config.n_symbols;
    let vanilla_correct =
        answer_argmax(lm, &prompt, n_symbols).map_err(|e| anyhow!("{e}"))? == sample.answer_token();

    // Forward-only attention for the probe-based methods.
    let needs_trace = methods.iter().any(|m| matches!(m, Method::Fastv | Method::Predicted));
    let trace = if needs_trace {
        Some(capture_prompt(lm, &prompt).map_err(|e| anyhow!("{e}"))?)
    } else {
        None
    };
    let predicted_scores = match (compressor, &trace) {
        (Some(params), Some(trace)) if methods.contains(&Method::Predicted) => {
            let a0v = relprune::compressor::extract_a0v(trace, &layout).map_err(|e| anyhow!("{e}"))?;
            Some(predict(params, &a0v).map_err(|e| anyhow!("{e}"))?)
        }
        _ => None,
    };
    let label_for_kl = match (&predicted_scores, explained) {
        (Some(_), Some(scores)) => Some(prepare_label(scores).map_err(|e| anyhow!("{e}"))?.0),
        _ => None,
    };

    let mut cells = Vec::with_capacity(methods.len() * ratios.len());
    for method in methods {
        for (ratio_idx, &ratio) in ratios.iter().enumerate() {
            let plan: CompressionPlan = match method {
                Method::Explain => {
                    let scores = explained
                        .ok_or_else(|| anyhow!("explain method needs explained relevance"))?;
                    topk_plan(scores, ratio).map_err(|e| anyhow!("{e}"))?
                }
                Method::Predicted => {
                    let scores = predicted_scores
                        .as_ref()
                        .ok_or_else(|| anyhow!("predicted method needs a trained compressor"))?;
                    topk_plan(scores, ratio).map_err(|e| anyhow!("{e}"))?
                }
                Method::Random => {
                    random_plan(plan_seed(config.seed, sample_id, ratio_idx), layout.n_vis, ratio)
                        .map_err(|e| anyhow!("{e}"))?
                }
                Method::Fastv => {
                    let trace = trace.as_ref().expect("trace captured for fastv");
                    fastv_plan(trace, &layout, ratio, config.fastv_layer).map_err(|e| anyhow!("{e}"))?
                }
            };
            let (pruned, _) = apply_plan(&prompt, &layout, &plan).map_err(|e| anyhow!("{e}"))?;
            let correct = answer_argmax(lm, &pruned, n_symbols).map_err(|e| anyhow!("{e}"))?
                == sample.answer_token();
            let kl = match (method, &predicted_scores, &label_for_kl) {
                (Method::Predicted, Some(pred), Some(label)) => Some(
                    relprune::compressor::kl_loss(label, pred).map_err(|e| anyhow!("{e}"))? as f64,
                ),
                _ => None,
            };
            cells.push(CellOutcome {
                method: *method,
                ratio,
                correct,
                oracle_hit: plan.contains(sample.oracle_index),
                kl,
                kept: plan.kept,
            });
        }
    }
    Ok(SampleOutcome { vanilla_correct, cells })
}

/// Evaluate pruning methods over the held-out slice; writes plans JSONL,
/// results CSV, and the markdown table. Returns the result rows.
pub fn stage_eval(
    config: &ExperimentConfig,
    out_dir: &Path,
    methods: &[Method],
    ratios: &[f64],
) -> Result<Vec<ResultRow>> {
    use rayon::prelude::*;

    let lm = load_lm(out_dir)?;
    let heldout = read_samples(&out_dir.join(F_HELDOUT))?;
    let slice = heldout
        .get(..config.eval_samples)
        .ok_or_else(|| anyhow!("held-out set smaller than eval_samples"))?;

    let compressor = if methods.contains(&Method::Predicted) {
        Some(load_compressor(out_dir)?)
    } else {
        None
    };

    // Explained relevance comes from the explain stage when present, and is
    // recomputed inline otherwise.
    let needs_explained = methods.iter().any(|m| matches!(m, Method::Explain | Method::Predicted));
    let explained: Vec<Option<RelevanceScores<f32>>> = if needs_explained {
        let path = out_dir.join(relevance_file(config.strategy));
        if path.exists() {
            let file = File::open(&path)?;
            let records = relprune::explain::read_relevance_jsonl(BufReader::new(file))
                .map_err(|e| anyhow!("{e}"))?;
            let mut by_id: Vec<Option<RelevanceScores<f32>>> = vec![None; slice.len()];
            for rec in records {
                if (rec.sample_id as usize) < by_id.len() {
                    by_id[rec.sample_id as usize] = Some(
                        RelevanceScores::new(rec.r_v.clone(), Source::Explained)
                            .map_err(|e| anyhow!("{e}"))?,
                    );
                }
            }
            for (i, slot) in by_id.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = Some(explained_scores(&lm, &slice[i], config.strategy, config.clamp)?);
                }
            }
            by_id
        } else {
            let computed: Result<Vec<_>> = slice
                .par_iter()
                .map(|s| explained_scores(&lm, s, config.strategy, config.clamp).map(Some))
                .collect();
            computed?
        }
    } else {
        vec![None; slice.len()]
    };

    let outcomes: Result<Vec<SampleOutcome>> = slice
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            eval_sample(
                config,
                &lm,
                compressor.as_ref(),
                explained[i].as_ref(),
                methods,
                ratios,
                i as u64,
                sample,
            )
        })
        .collect();
    let outcomes = outcomes?;

    let n = outcomes.len();
    let vanilla_acc = outcomes.iter().filter(|o| o.vanilla_correct).count() as f64 / n as f64;
    let mut rows = vec![ResultRow {
        method: "vanilla".to_string(),
        ratio: 1.0,
        accuracy: vanilla_acc,
        preservation_pct: 100.0,
        oracle_hit_rate: 1.0,
        mean_kl: None,
        n_samples: n,
        seed: config.seed,
    }];

    let mut plan_records = Vec::with_capacity(n * methods.len() * ratios.len());
    for method in methods {
        for &ratio in ratios {
            let cells: Vec<&CellOutcome> = outcomes
                .iter()
                .flat_map(|o| o.cells.iter())
                .filter(|c| c.method == *method && (c.ratio - ratio).abs() < 1e-12)
                .collect();
            let accuracy = cells.iter().filter(|c| c.correct).count() as f64 / n as f64;
            let oracle_hit_rate = cells.iter().filter(|c| c.oracle_hit).count() as f64 / n as f64;
            let kls: Vec<f64> = cells.iter().filter_map(|c| c.kl).collect();
            let mean_kl = if kls.is_empty() {
                None
            } else {
                Some(kls.iter().sum::<f64>() / kls.len() as f64)
            };
            rows.push(ResultRow {
                method: method.tag().to_string(),
                ratio,
                accuracy,
                preservation_pct: preservation(&[accuracy], &[vanilla_acc]).map_err(|e| anyhow!("{e}"))?,
                oracle_hit_rate,
                mean_kl,
                n_samples: n,
                seed: config.seed,
            });
        }
    }

    for (i, outcome) in outcomes.iter().enumerate() {
        for cell in &outcome.cells {
            plan_records.push(PlanRecord {
                sample_id: i as u64,
                ratio: cell.ratio,
                kept: cell.kept.clone(),
                method: cell.method.tag().to_string(),
            });
        }
    }

    write_atomic(&out_dir.join(F_PLANS), |w| {
        relprune::compress::write_plans_jsonl(w, &plan_records).map_err(|e| anyhow!("{e}"))
    })?;
    write_atomic(&out_dir.join(F_RESULTS), |w| write_results_csv(w, &rows))?;
    write_atomic(&out_dir.join(F_RESULTS_MD), |w| write_results_markdown(w, &rows))?;
    Ok(rows)
}

// ── pipeline ─────────────────────────────────────────────────────────

fn stage<T>(name: &str, seed: u64, run: impl FnOnce() -> Result<T>) -> Result<T> {
    run().with_context(|| format!("pipeline stage `{name}` failed (seed {seed})"))
}

/// gen-data -> train-lm -> explain -> build-pairs -> train-compressor ->
/// eval, with a manifest of content hashes at the end.
pub fn run_pipeline(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ResultRow>> {
    std::fs::create_dir_all(out_dir)?;
    let seed = config.seed;
    stage("gen-data", seed, || stage_gen_data(config, out_dir))?;
    let report = stage("train-lm", seed, || stage_train_lm(config, out_dir))?;
    eprintln!("train-lm: held-out accuracy {:.4}", report.final_accuracy);
    stage("explain", seed, || stage_explain(config, out_dir, None, None))?;
    let kept = stage("build-pairs", seed, || stage_build_pairs(config, out_dir))?;
    eprintln!("build-pairs: {kept} pairs retained from {} samples", config.n_pair_source);
    let creport = stage("train-compressor", seed, || stage_train_compressor(config, out_dir))?;
    eprintln!(
        "train-compressor: held-out KL {:.4} (uniform {:.4})",
        creport.heldout_kl, creport.uniform_kl
    );
    let rows = stage("eval", seed, || stage_eval(config, out_dir, &config.methods, &config.ratios))?;
    write_manifest(out_dir)?;
    Ok(rows)
}

/// The pipeline artifacts that must exist after a full run.
pub fn expected_artifacts(config: &ExperimentConfig) -> Vec<PathBuf> {
    vec![
        PathBuf::from(F_TRAIN),
        PathBuf::from(F_HELDOUT),
        PathBuf::from(F_PAIR_SOURCE),
        PathBuf::from(F_LM),
        PathBuf::from(F_LM_CURVE),
        PathBuf::from(relevance_file(config.strategy)),
        PathBuf::from(F_PAIRS),
        PathBuf::from(F_COMPRESSOR),
        PathBuf::from(F_COMPRESSOR_CURVE),
        PathBuf::from(F_PLANS),
        PathBuf::from(F_RESULTS),
        PathBuf::from(F_RESULTS_MD),
        PathBuf::from("manifest.json"),
    ]
}
