//! Experiment configuration: one JSON document drives the whole pipeline.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use relprune::explain::AggregationStrategy;
use relprune::toylm::{LMConfig, Vocab, N_INSTR, N_SYS};

/// Pruning method evaluated by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "explain")]
    Explain,
    #[serde(rename = "predicted")]
    Predicted,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "fastv")]
    Fastv,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Explain => "explain",
            Method::Predicted => "predicted",
            Method::Random => "random",
            Method::Fastv => "fastv",
        }
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explain" => Ok(Method::Explain),
            "predicted" => Ok(Method::Predicted),
            "random" => Ok(Method::Random),
            "fastv" => Ok(Method::Fastv),
            other => bail!("unknown method `{other}` (explain|predicted|random|fastv)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmHyper {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of training on a randomly pruned oracle-keeping view.
    pub aug_prob: f64,
    pub clip_norm: Option<f64>,
}

impl Default for LmHyper {
    fn default() -> Self {
        LmHyper {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            epochs: 6,
            batch_size: 64,
            lr: 1e-3,
            aug_prob: 0.5,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorHyper {
    pub n_layers: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_frac: f64,
}

impl Default for CompressorHyper {
    fn default() -> Self {
        CompressorHyper {
            n_layers: 5,
            kernel: 3,
            channels: vec![32, 64, 128, 256, 512],
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid_size: usize,
    pub n_symbols: usize,
    /// LM training samples.
    pub n_train_lm: usize,
    /// Held-out samples (LM accuracy and pruning evaluation).
    pub n_heldout: usize,
    /// Samples fed to the pair builder (filtered by answer correctness).
    pub n_pair_source: usize,
    /// Held-out samples evaluated per method/ratio.
    pub eval_samples: usize,
    pub ratios: Vec<f64>,
    pub strategy: AggregationStrategy,
    /// GAE-style positivity clamp on the per-head relevance update.
    pub clamp: bool,
    pub methods: Vec<Method>,
    /// Scoring layer for the shallow-attention baseline; None = default cap.
    pub fastv_layer: Option<usize>,
    pub lm: LmHyper,
    pub compressor: CompressorHyper,
    /// Worker threads for sample-level parallelism; 0 = all cores.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            grid_size: 4,
            n_symbols: 8,
            n_train_lm: 20_000,
            n_heldout: 1_000,
            n_pair_source: 6_000,
            eval_samples: 500,
            ratios: vec![0.5, 0.25, 0.1],
            strategy: AggregationStrategy::GradWeighted,
            clamp: false,
            methods: vec![Method::Explain, Method::Predicted, Method::Random, Method::Fastv],
            fastv_layer: None,
            lm: LmHyper::default(),
            compressor: CompressorHyper::default(),
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 || self.n_symbols < 2 {
            bail!("grid_size and n_symbols must each be at least 2");
        }
        if self.ratios.is_empty() {
            bail!("at least one retention ratio is required");
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r <= 1.0) {
                bail!("retention ratio {r} outside (0, 1]");
            }
        }
        if self.eval_samples == 0 || self.eval_samples > self.n_heldout {
            bail!(
                "eval_samples {} must be in 1..={} (n_heldout)",
                self.eval_samples,
                self.n_heldout
            );
        }
        if self.n_train_lm == 0 || self.n_pair_source == 0 {
            bail!("dataset sizes must be positive");
        }
        self.lm_config().validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.compressor_config().validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.grid_size, self.n_symbols).map_err(|e| anyhow::anyhow!("{e}"))
    }

    /// LM shape for this task; vocab and sequence budget derived from the
    /// grid unless a larger max_seq is needed.
    pub fn lm_config(&self) -> LMConfig {
        let n_cells = self.grid_size * self.grid_size;
        let vocab_size = self.n_symbols * (1 + n_cells) + 2 * self.grid_size + 3;
        let max_seq = N_SYS + n_cells + N_INSTR + 2;
        LMConfig {
            n_layers: self.lm.n_layers,
            n_heads: self.lm.n_heads,
            d_model: self.lm.d_model,
            d_ffn: self.lm.d_ffn,
            vocab_size,
            max_seq,
        }
    }

    pub fn compressor_config(&self) -> relprune::compressor::CompressorConfig {
        relprune::compressor::CompressorConfig {
            n_layers: self.compressor.n_layers,
            kernel: self.compressor.kernel,
            channels: self.compressor.channels.clone(),
        }
    }

    pub fn lm_train_options(&self) -> relprune::toylm::TrainOptions {
        relprune::toylm::TrainOptions {
            epochs: self.lm.epochs,
            batch_size: self.lm.batch_size,
            lr: self.lm.lr,
            seed: self.seed,
            aug_prob: self.lm.aug_prob,
            clip_norm: self.lm.clip_norm,
        }
    }

    pub fn compressor_train_options(&self) -> relprune::compressor::CompressorTrainOptions {
        relprune::compressor::CompressorTrainOptions {
            epochs: self.compressor.epochs,
            batch_size: self.compressor.batch_size,
            lr: self.compressor.lr,
            seed: self.seed,
            holdout_frac: self.compressor.holdout_frac,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let config: ExperimentConfig = serde_json::from_str(r#"{"grid_size": 3, "seed": 7}"#).unwrap();
        assert_eq!(config.grid_size, 3);
        assert_eq!(config.seed, 7);
        assert_eq!(config.n_symbols, 8);
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let mut config = ExperimentConfig::default();
        config.ratios = vec![1.5];
        assert!(config.validate().is_err());
    }

    #[test]
    fn strategy_serializes_as_short_tag() {
        let json = serde_json::to_string(&ExperimentConfig::default()).unwrap();
        assert!(json.contains("\"strategy\":\"grad\""));
    }
}
