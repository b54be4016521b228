//! Command-line entry point wiring generation, training, evaluation,
//! search, and gating analysis into reproducible pipelines.
//!
//! Any flag of the form `--section.key value` (or `--section.key=value`)
//! is a config override, e.g. `--train.alpha 5e-3`. Exit codes: 0 success,
//! 2 config error, 3 data error, 4 numerical failure.

use clap::{Parser, Subcommand, ValueEnum};
use hiermoe_core::config::{resolve, RawConfig};
use hiermoe_core::dse::SearchBudget;
use hiermoe_core::pipeline::{self, BenchmarkArgs};
use hiermoe_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "hiermoe",
    version,
    about = "Hierarchical mixture-of-experts surrogate models for HLS pragma design-space exploration"
)]
struct Cli {
    /// Flat key-value config file; `--section.key value` flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; all randomness flows through named sub-seeds.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Allow overwriting an output directory that already holds a run.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    Regression,
    Classification,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic kernel suite with labeled design samples.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of source kernels (overrides data.source).
        #[arg(long)]
        source: Option<usize>,
        /// Number of target kernels (overrides data.target).
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        allow_no_targets: bool,
    },
    /// Pretrain a model on the source kernels.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "regression")]
        task: Task,
    },
    /// Fine-tune a pretrained model per target kernel.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained model directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to specific kernels (default: all targets).
        #[arg(long)]
        kernel: Vec<String>,
    },
    /// Held-out MSE (and classifier accuracy) of fine-tuned models.
    EvalOffline {
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned regression model directory (per-kernel subdirs).
        #[arg(long)]
        finetuned: PathBuf,
        /// Fine-tuned classifier directory.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Surrogate-guided design-space search with oracle scoring of the
    /// top-k candidates.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Search a single kernel (default: all targets).
        #[arg(long)]
        kernel: Option<String>,
        /// Maximum designs to enumerate (overrides dse.max_designs).
        #[arg(long)]
        budget: Option<u64>,
        /// Oracle-scored candidate count (overrides dse.top_k).
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Expert-assignment tables for a trained model.
    AnalyzeGating {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per kernel used for the tables.
        #[arg(long, default_value_t = 200)]
        per_kernel_cap: usize,
    },
    /// Run the full offline/online protocol and emit benchmark.md.
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        /// Preset: `desk`, `tiny`, or `full`.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Shorthand for `--preset tiny`.
        #[arg(long)]
        tiny: bool,
        /// Also run the ablation sweeps (granularities, block variants,
        /// gate designs, split strategies, expert counts).
        #[arg(long)]
        ablations: bool,
    },
}

/// Splits dotted `--section.key value` overrides out of the raw argv so
/// clap only sees its own flags.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut clean = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            clean.push(arg);
            continue;
        };
        if !body.contains('.') {
            clean.push(arg);
            continue;
        }
        if let Some((key, value)) = body.split_once('=') {
            overrides.push((key.to_string(), value.to_string()));
        } else {
            match it.next() {
                Some(value) => overrides.push((body.to_string(), value)),
                None => return Err(format!("override --{body} is missing a value")),
            }
        }
    }
    Ok((clean, overrides))
}

fn validate_thread_env() -> Result<(), Error> {
    match std::env::var("HIERMOE_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::config(format!(
                "HIERMOE_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn run() -> Result<(), Error> {
    let argv: Vec<String> = std::env::args().collect();
    let (clean, overrides) = extract_overrides(argv).map_err(Error::Config)?;
    let cli = Cli::parse_from(clean);
    validate_thread_env()?;

    let mut raw = match &cli.config {
        Some(path) => RawConfig::from_file(path)?,
        None => RawConfig::default(),
    };
    for (k, v) in &overrides {
        raw.set(k, v);
    }

    // fold command-level convenience flags into the config map so the
    // manifest snapshot reflects the effective settings
    match &cli.command {
        Command::GenData { source, target, allow_no_targets, .. } => {
            if let Some(s) = source {
                raw.set("data.source", &s.to_string());
            }
            if let Some(t) = target {
                raw.set("data.target", &t.to_string());
            }
            if *allow_no_targets {
                raw.set("data.allow_no_targets", "true");
            }
        }
        Command::Search { budget, topk, .. } => {
            if let Some(b) = budget {
                raw.set("dse.max_designs", &b.to_string());
            }
            if let Some(k) = topk {
                raw.set("dse.top_k", &k.to_string());
            }
        }
        _ => {}
    }
    let cfg = resolve(&raw, cli.seed)?;
    let snapshot = raw.entries.clone();

    match cli.command {
        Command::GenData { out, .. } => {
            pipeline::run_gen_data(&pipeline::GenDataArgs {
                out: out.clone(),
                seed: cli.seed,
                force: cli.force,
                config_snapshot: snapshot,
                cfg,
            })?;
            println!("wrote dataset to {}", out.display());
        }
        Command::Pretrain { data, out, task } => {
            let report = pipeline::run_pretrain(&pipeline::PretrainArgs {
                data,
                out: out.clone(),
                seed: cli.seed,
                force: cli.force,
                classification: matches!(task, Task::Classification),
                config_snapshot: snapshot,
                cfg,
            })?;
            println!(
                "pretrained {} ({} params), best val loss {:.4} at epoch {}",
                report.model, report.n_params, report.best_val_loss, report.best_epoch
            );
            println!("checkpoint in {}", out.display());
        }
        Command::Finetune { data, model, out, kernel } => {
            let records = pipeline::run_finetune(&pipeline::FinetuneArgs {
                data,
                model_dir: model,
                out: out.clone(),
                seed: cli.seed,
                force: cli.force,
                kernels: (!kernel.is_empty()).then_some(kernel),
                config_snapshot: snapshot,
                cfg,
            })?;
            for r in &records {
                println!(
                    "fine-tuned {} on {} samples (final train loss {:.4})",
                    r.kernel_id, r.k, r.final_train_loss
                );
            }
            println!("fine-tuned models in {}", out.display());
        }
        Command::EvalOffline { data, finetuned, classifier, out } => {
            let report = pipeline::run_eval_offline(&pipeline::EvalOfflineArgs {
                data,
                finetuned_dir: finetuned,
                classifier_dir: classifier,
                out: out.clone(),
                seed: cli.seed,
                force: cli.force,
                config_snapshot: snapshot,
            })?;
            for k in &report.per_kernel {
                println!("{}: total MSE {:.4} over {} samples", k.kernel_id, k.total_mse, k.n_eval);
            }
            println!("mean total MSE {:.4}", report.mean_total_mse);
            if let Some(acc) = report.classifier_accuracy {
                println!("classifier accuracy {:.1}%", 100.0 * acc);
            }
        }
        Command::Search { data, finetuned, classifier, out, kernel, .. } => {
            let budget = SearchBudget { max_designs: cfg.dse.max_designs, top_k: cfg.dse.top_k };
            let report = pipeline::run_search(&pipeline::SearchArgs {
                data,
                finetuned_dir: finetuned,
                classifier_dir: classifier,
                out: out.clone(),
                kernel,
                budget,
                seed: cli.seed,
                force: cli.force,
                config_snapshot: snapshot,
            })?;
            for r in &report.results {
                println!(
                    "{}: speedup {:.3} (best latency {:.0}, reference {:.0}{})",
                    r.kernel_id,
                    r.speedup,
                    r.best_latency,
                    r.reference_latency,
                    if r.fallback { ", fallback" } else { "" }
                );
            }
            println!(
                "aggregate speedup: arithmetic {:.3}, geometric {:.3}",
                report.arith_mean_speedup, report.geo_mean_speedup
            );
        }
        Command::AnalyzeGating { data, model, out, per_kernel_cap } => {
            let report = pipeline::run_analyze_gating(&pipeline::AnalyzeGatingArgs {
                data,
                model_dir: model,
                out: out.clone(),
                seed: cli.seed,
                force: cli.force,
                per_kernel_cap,
                config_snapshot: snapshot,
            })?;
            if let Some(high) = &report.high_level {
                for kg in high {
                    let pct: Vec<String> =
                        kg.mean_weights.iter().map(|w| format!("{:.1}%", 100.0 * w)).collect();
                    println!("{}: high-level weights [{}]", kg.kernel_id, pct.join(", "));
                }
            }
            println!("gating report in {}", out.display());
        }
        Command::Benchmark { out, preset, tiny, ablations } => {
            let preset = if tiny { "tiny".to_string() } else { preset };
            let report = pipeline::run_benchmark(&BenchmarkArgs {
                out: out.clone(),
                seed: cli.seed,
                force: cli.force,
                preset,
                ablations,
                config_snapshot: snapshot,
            })?;
            for row in &report.rows {
                println!(
                    "{:<18} offline MSE {:.3} ± {:.3}, geo speedup {}",
                    row.model,
                    row.offline_mean,
                    row.offline_std,
                    row.geo_speedup.map(|g| format!("{g:.2}")).unwrap_or_else(|| "-".into())
                );
            }
            println!("benchmark report in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
