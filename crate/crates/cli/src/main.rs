use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use unsparse_core::pipeline::bench::{bench_model, read_csv, write_report};
use unsparse_core::pipeline::config::streams;
use unsparse_core::pipeline::{
    configure, derive_seed, load_selected, run_bench, run_prune, run_quantize, run_verify, Overrides,
    PipelineConfig, VerifyOptions,
};
use unsparse_core::quant::QuantMode;
use unsparse_core::trainer::SplitKind;

#[derive(Parser)]
#[command(name = "unsparse", version, about = "Prune, quantize and benchmark sparse convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Dense training followed by the pruning search; writes a checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Continue from the resumable state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Override the iteration budget.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Quantises a pruned checkpoint and reports accuracy deltas.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default: the config's output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Mode to apply (repeatable): passthrough, 16b/16b, 4b/16b.
        #[arg(long = "mode", value_parser = parse_json_str::<QuantMode>)]
        modes: Vec<QuantMode>,
        /// Split to score on: train, validation or test.
        #[arg(long, value_parser = parse_json_str::<SplitKind>)]
        split: Option<SplitKind>,
    },
    /// Times sparse against dense convolution.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Bench the convolution layers of this checkpoint instead of
        /// synthetic layers.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Picks sparse or dense per layer from a bench report.
    Configure {
        #[command(flatten)]
        common: Common,
        /// Bench CSV (default: `bench.csv` in the output directory).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Runs the oracle suite; exits non-zero on any failure.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Randomised convolution cases.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        /// Corrupt serialized filters before reading them back.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn parse_json_str<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn load_config(common: &Common, iterations: Option<usize>) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    let cli = Overrides { seed: common.seed, workers: common.workers, out: common.out.clone(), iterations };
    config.apply(&cli.or(Overrides::from_env()?));
    config.validate()?;
    Ok(config)
}

fn require_config(common: &Common) -> Result<()> {
    if common.config.is_none() {
        bail!("--config is required for this command");
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Prune { common, resume, iterations } => {
            require_config(&common)?;
            let config = load_config(&common, iterations)?;
            let manifest = run_prune(&config, resume)?;
            if let Some(r) = &manifest.result {
                println!(
                    "checkpoint {}: weighted sparsity {:.4}, test {:.4} (dense {:.4}), caps met: {}",
                    config.out.display(),
                    r.weighted_sparsity,
                    r.scores.test,
                    manifest.baseline.test,
                    r.meets_caps
                );
            }
        }
        Command::Quantize { common, checkpoint, modes, split } => {
            let config = load_config(&common, None)?;
            let checkpoint = checkpoint.unwrap_or_else(|| config.out.clone());
            let modes = if modes.is_empty() { config.quantize.modes.clone() } else { modes };
            let split = split.unwrap_or(config.quantize.split);
            let rows = run_quantize(&checkpoint, &modes, split, config.workers, &config.out)?;
            for r in rows {
                println!("{:<12} {:.4} -> {:.4} ({:+.2} points)", r.mode.name(), r.baseline, r.quantized, r.delta_points);
            }
        }
        Command::Bench { common, checkpoint } => {
            require_config(&common)?;
            let config = load_config(&common, None)?;
            let seed = derive_seed(config.seed, streams::BENCH);
            let report = match checkpoint {
                Some(dir) => {
                    let (_, model, _) = load_selected(&dir)?;
                    let bench = config.bench.clone().unwrap_or_default();
                    bench_model(&model, &bench, config.workers, seed)?
                }
                None => run_bench(config.bench_config()?, config.workers, seed)?,
            };
            write_report(&config.out, &report)?;
            for r in &report.rows {
                println!(
                    "{:<28} {:>5.1}% {:<8} sparse {:>9.3} ms  dense {:>9.3} ms  sb {}  x{:.2}",
                    r.layer_id,
                    r.sparsity_pct,
                    r.precision.name(),
                    r.sparse_ms,
                    r.dense_ms,
                    r.sb_s,
                    r.speedup
                );
            }
        }
        Command::Configure { common, report } => {
            require_config(&common)?;
            let config = load_config(&common, None)?;
            let path = report.unwrap_or_else(|| config.out.join("bench.csv"));
            let rows = read_csv(&path).with_context(|| format!("reading {}", path.display()))?;
            let required: Vec<String> = match &config.bench {
                Some(b) => b.resolve_layers()?.into_iter().map(|l| l.id).collect(),
                None => Vec::new(),
            };
            let backend = configure(&rows, &required)?;
            std::fs::create_dir_all(&config.out)?;
            write_json(&config.out.join("backend_config.json"), &backend)?;
            println!("{} of {} rows run sparse", backend.sparse_count(), backend.layers.len());
        }
        Command::Verify { common, cases, inject_fault } => {
            let config = load_config(&common, None)?;
            let opts = VerifyOptions { seed: config.seed, conv_cases: cases, inject_fault, ..VerifyOptions::default() };
            let report = run_verify(&opts, config.workers);
            print!("{}", report.table());
            if !report.passed() {
                eprintln!("verify: at least one check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
