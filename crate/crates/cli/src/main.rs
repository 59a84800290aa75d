//! `relprune` command line: dataset generation, LM training, relevance
//! extraction, compressor training, pruning evaluation, FLOPs reports,
//! artifact validation, and the full pipeline.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use relprune::explain::AggregationStrategy;
use relprune::flops::{self, ConvFlopsConfig, LlmFlopsConfig};

use relprune_cli::config::{ExperimentConfig, Method};
use relprune_cli::results::write_results_markdown;
use relprune_cli::stages::{self, with_pool};
use relprune_cli::validate::validate_dir;
use relprune_cli::artifacts::write_atomic;

#[derive(Parser)]
#[command(name = "relprune", version, about = "Relevance-guided visual-token pruning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides the config file.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Aggregation strategy: grad | mean.
    #[arg(long)]
    strategy: Option<String>,
    /// Positivity clamp on the relevance update: on | off.
    #[arg(long)]
    clamp: Option<String>,
    /// Directory for per-sample heatmap CSV exports.
    #[arg(long)]
    heatmap_out: Option<PathBuf>,
    /// File for an attention-trace dump of the first sample.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pruning method: explain | predicted | random | fastv.
    #[arg(long)]
    method: String,
    /// Retention ratio in (0, 1].
    #[arg(long)]
    ratio: f64,
}

#[derive(Args)]
struct FlopsArgs {
    /// Visual-token count.
    #[arg(long)]
    n: u128,
    /// Hidden size.
    #[arg(long)]
    d: u128,
    /// FFN intermediate size.
    #[arg(long)]
    m: u128,
    /// FFN layer count.
    #[arg(long, value_name = "L")]
    ffn_l: u128,
    /// Transformer block count.
    #[arg(long)]
    nl: u128,
    /// Conv channel dims, comma separated.
    #[arg(long, default_value = "32,64,128,256,512")]
    conv_channels: String,
    /// Conv kernel size.
    #[arg(long, default_value_t = 3)]
    kernel: u128,
    /// External total to take ratios against.
    #[arg(long)]
    stated_total: Option<u128>,
    /// Count the final channel-aggregation pointwise layer.
    #[arg(long, default_value_t = true)]
    final_pointwise: bool,
    /// Directory for flops.csv / flops.md (print-only when omitted).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Directory to validate.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the grid-QA dataset splits.
    GenData(CommonArgs),
    /// Train the toy LM on the generated dataset.
    TrainLm(CommonArgs),
    /// Compute explained relevance for the evaluation slice.
    Explain(ExplainArgs),
    /// Build compressor training pairs from correct answers.
    BuildPairs(CommonArgs),
    /// Train the relevance predictor on the built pairs.
    TrainCompressor(CommonArgs),
    /// Evaluate one pruning method at one retention ratio.
    Eval(EvalArgs),
    /// Analytic FLOPs accounting.
    Flops(FlopsArgs),
    /// Run every stage end to end.
    Pipeline(CommonArgs),
    /// Check every artifact in an output directory.
    Validate(ValidateArgs),
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| CliError::Usage(format!("{e:#}")))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        config.jobs = jobs;
    }
    config.validate().map_err(|e| CliError::Usage(format!("{e:#}")))?;
    Ok(config)
}

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(common) => {
            let config = load_config(&common)?;
            runtime(std::fs::create_dir_all(&common.out_dir).map_err(Into::into))?;
            runtime(stages::stage_gen_data(&config, &common.out_dir))?;
            println!(
                "wrote {} + {} + {} samples under {}",
                config.n_train_lm,
                config.n_heldout,
                config.n_pair_source,
                common.out_dir.display()
            );
        }
        Command::TrainLm(common) => {
            let config = load_config(&common)?;
            let out = common.out_dir.clone();
            let report = runtime(with_pool(config.jobs, || stages::stage_train_lm(&config, &out)))?;
            println!("held-out accuracy: {:.4}", report.final_accuracy);
        }
        Command::Explain(args) => {
            let mut config = load_config(&args.common)?;
            if let Some(s) = &args.strategy {
                config.strategy = AggregationStrategy::from_str(s)
                    .map_err(|e| CliError::Usage(format!("{e}")))?;
            }
            if let Some(c) = &args.clamp {
                config.clamp = match c.as_str() {
                    "on" => true,
                    "off" => false,
                    other => return Err(CliError::Usage(format!("--clamp takes on|off, got {other}"))),
                };
            }
            let out = args.common.out_dir.clone();
            let n = runtime(with_pool(config.jobs, || {
                stages::stage_explain(&config, &out, args.heatmap_out.as_deref(), args.trace_out.as_deref())
            }))?;
            println!("explained {n} samples ({} strategy)", config.strategy.tag());
        }
        Command::BuildPairs(common) => {
            let config = load_config(&common)?;
            let out = common.out_dir.clone();
            let n = runtime(with_pool(config.jobs, || stages::stage_build_pairs(&config, &out)))?;
            println!("retained {n} of {} samples", config.n_pair_source);
        }
        Command::TrainCompressor(common) => {
            let config = load_config(&common)?;
            let out = common.out_dir.clone();
            let report =
                runtime(with_pool(config.jobs, || stages::stage_train_compressor(&config, &out)))?;
            println!(
                "held-out KL {:.4} vs uniform {:.4} ({} train / {} held-out pairs)",
                report.heldout_kl, report.uniform_kl, report.n_train, report.n_heldout
            );
        }
        Command::Eval(args) => {
            let config = load_config(&args.common)?;
            let method =
                Method::from_str(&args.method).map_err(|e| CliError::Usage(format!("{e}")))?;
            if !(args.ratio > 0.0 && args.ratio <= 1.0) {
                return Err(CliError::Usage(format!("--ratio {} outside (0, 1]", args.ratio)));
            }
            let out = args.common.out_dir.clone();
            let rows = runtime(with_pool(config.jobs, || {
                stages::stage_eval(&config, &out, &[method], &[args.ratio])
            }))?;
            let mut buf = Vec::new();
            runtime(write_results_markdown(&mut buf, &rows))?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::Flops(args) => {
            let channels: Vec<u128> = args
                .conv_channels
                .split(',')
                .map(|s| s.trim().parse::<u128>().map_err(|e| CliError::Usage(format!("bad channel `{s}`: {e}"))))
                .collect::<Result<_, _>>()?;
            let llm = LlmFlopsConfig { n: args.n, d: args.d, m: args.m, l: args.ffn_l, n_layers: args.nl };
            let conv = ConvFlopsConfig::from_channels(args.n, &channels, args.kernel, args.final_pointwise);
            let report = runtime(flops::report(&llm, &conv, args.stated_total).map_err(|e| anyhow!("{e}")))?;
            let mut md = Vec::new();
            runtime(report.write_markdown(&mut md).map_err(|e| anyhow!("{e}")))?;
            print!("{}", String::from_utf8_lossy(&md));
            if let Some(dir) = &args.out_dir {
                runtime(std::fs::create_dir_all(dir).map_err(Into::into))?;
                runtime(write_atomic(&dir.join("flops.csv"), |w| {
                    report.write_csv(w).map_err(|e| anyhow!("{e}"))
                }))?;
                runtime(write_atomic(&dir.join("flops.md"), |w| {
                    w.write_all(&md)?;
                    Ok(())
                }))?;
            }
        }
        Command::Pipeline(common) => {
            let config = load_config(&common)?;
            let out = common.out_dir.clone();
            let rows = runtime(with_pool(config.jobs, || stages::run_pipeline(&config, &out)))?;
            let mut buf = Vec::new();
            runtime(write_results_markdown(&mut buf, &rows))?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::Validate(args) => {
            let files = runtime(validate_dir(&args.out_dir))?;
            for (path, kind) in &files {
                println!("ok {:?} {}", kind, path.display());
            }
            println!("{} files valid", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
