//! Command implementations behind the CLI: data generation, pretraining,
//! fine-tuning, offline evaluation, search, gating analysis, and the full
//! benchmark protocol. Each command owns one output directory with a run
//! manifest; reruns with the same seed are byte-identical.

pub mod benchmark;

pub use benchmark::{preset_by_name, run_ablations, run_benchmark_protocol, BenchmarkPreset, BenchmarkReport};

use crate::config::{ModelSpec, RunConfig};
use crate::dataset::{self, Dataset};
use crate::dse::{self, KnownBest, ModelPredictor, SearchBudget};
use crate::error::{Error, Result};
use crate::manifest::{claim_output_dir, write_manifest, RunManifest};
use crate::model::{HierParams, ModelParams, OutputKind};
use crate::nn::checkpoint;
use crate::seed;
use crate::train::{
    self, evaluate, finetune, pretrain, select_finetune_set, source_data, target_items, AnyModel,
    KernelEval, TrainItem, TrainOutcome,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Initializes a fresh model for a spec from the named init stream.
pub fn init_model(spec: &ModelSpec, run_seed: u64, ns: &str) -> AnyModel {
    let mut rng = seed::rng(run_seed, &format!("{ns}.init"));
    match spec {
        ModelSpec::Single(cfg) => AnyModel::Single(ModelParams::init(*cfg, &mut rng)),
        ModelSpec::Hier(cfg) => AnyModel::Hier(HierParams::init(*cfg, &mut rng)),
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    spec: ModelSpec,
    seed: u64,
}

/// Writes `model.json` + `checkpoint.bin` into `dir`.
pub fn save_model(dir: &Path, model: &AnyModel, spec: &ModelSpec, run_seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mf = ModelFile { spec: *spec, seed: run_seed };
    let path = dir.join(MODEL_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&mf)?).map_err(|e| Error::io(&path, e))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), model.config_hash(), &model.named_tensors())
}

/// Loads a model directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(AnyModel, ModelSpec, u64)> {
    let path = dir.join(MODEL_FILE);
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mf: ModelFile = serde_json::from_slice(&raw)?;
    let mut model = init_model(&mf.spec, mf.seed, "load");
    let (hash, blobs) = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    if hash != model.config_hash() {
        return Err(Error::data(format!(
            "{}: checkpoint config hash {hash:#x} does not match model.json",
            dir.display()
        )));
    }
    model.load_blobs(&blobs)?;
    Ok((model, mf.spec, mf.seed))
}

fn write_train_log(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    let path = dir.join(TRAIN_LOG_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for entry in &outcome.log {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub struct GenDataArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub config_snapshot: BTreeMap<String, String>,
    pub cfg: RunConfig,
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    claim_output_dir(&args.out, args.force)?;
    let data = dataset::build_dataset(
        args.seed,
        args.cfg.data.source,
        args.cfg.data.target,
        args.cfg.data.allow_no_targets,
        &args.cfg.data.scale,
    )?;
    dataset::save_dataset(&args.out, &data)?;
    let mut manifest = RunManifest::new("gen-data", args.seed, &["motif-lib", "spacing.gaps"])
        .with_config(&args.config_snapshot);
    manifest.outputs = vec!["suite.json".into(), "kernels/".into()];
    write_manifest(&args.out, &manifest)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub classification: bool,
    pub config_snapshot: BTreeMap<String, String>,
    pub cfg: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct PretrainReport {
    pub model: String,
    pub task: String,
    pub n_params: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub diverged: bool,
}

pub fn run_pretrain(args: &PretrainArgs) -> Result<PretrainReport> {
    claim_output_dir(&args.out, args.force)?;
    let ds = dataset::load_dataset(&args.data)?;
    let f_in = ds.suite.kernels[0].graph.layout.width();
    let outputs = if args.classification { OutputKind::Classification } else { OutputKind::Regression };
    let spec = args.cfg.model.spec(f_in, outputs)?;

    let mut cfg = args.cfg.train.clone();
    cfg.seed = args.seed;
    let data = source_data(&ds, &cfg, args.classification)?;
    let model = init_model(&spec, args.seed, "pretrain");
    let outcome = pretrain(model, &data, &cfg, "pretrain")?;

    save_model(&args.out, &outcome.model, &spec, args.seed)?;
    write_train_log(&args.out, &outcome)?;
    let report = PretrainReport {
        model: args.cfg.model.variant.clone(),
        task: if args.classification { "classification".into() } else { "regression".into() },
        n_params: outcome.model.n_params(),
        n_train: data.train.len(),
        n_val: data.val.len(),
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val,
        diverged: outcome.diverged,
    };
    write_json(&args.out.join(REPORT_FILE), &report)?;

    let mut manifest = RunManifest::new(
        "pretrain",
        args.seed,
        &["pretrain.init", "split", "pretrain.batch", "pretrain.dropout"],
    )
    .with_config(&args.config_snapshot);
    manifest.record_input("data", &args.data)?;
    manifest.outputs = vec![
        MODEL_FILE.into(),
        CHECKPOINT_FILE.into(),
        TRAIN_LOG_FILE.into(),
        REPORT_FILE.into(),
    ];
    write_manifest(&args.out, &manifest)?;
    if outcome.diverged {
        return Err(Error::Numerical(
            "training diverged (NaN loss); last good checkpoint retained".into(),
        ));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

pub struct FinetuneArgs {
    pub data: PathBuf,
    pub model_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub kernels: Option<Vec<String>>,
    pub config_snapshot: BTreeMap<String, String>,
    pub cfg: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneKernelRecord {
    pub kernel_id: String,
    pub k: usize,
    pub selected: Vec<usize>,
    pub final_train_loss: f64,
}

/// Fine-tunes the pretrained model on each target kernel's selected
/// samples. One subdirectory per kernel.
pub fn run_finetune(args: &FinetuneArgs) -> Result<Vec<FinetuneKernelRecord>> {
    claim_output_dir(&args.out, args.force)?;
    let ds = dataset::load_dataset(&args.data)?;
    let (model, spec, _) = load_model(&args.model_dir)?;
    let classification = model.outputs() == OutputKind::Classification;

    let mut cfg = args.cfg.train.clone();
    cfg.seed = args.seed;

    let kernel_ids: Vec<String> = match &args.kernels {
        Some(list) => list.clone(),
        None => ds.suite.targets().map(|k| k.id.clone()).collect(),
    };
    if kernel_ids.is_empty() {
        return Err(Error::data("no target kernels to fine-tune on"));
    }

    let mut records = Vec::new();
    for kid in &kernel_ids {
        let items = target_items(&ds, kid, classification)?;
        let k = effective_budget(&cfg, classification, items.len());
        let mut rng = seed::rng(args.seed, &format!("kmeans.{kid}"));
        let selected = select_finetune_set(&model, &items, k, cfg.split, &mut rng)?;
        let train_items: Vec<TrainItem> = selected.iter().map(|&i| items[i].clone()).collect();
        let outcome = finetune(model.clone(), &train_items, &cfg, &format!("finetune.{kid}"))?;

        let kdir = args.out.join(kid);
        save_model(&kdir, &outcome.model, &spec, args.seed)?;
        write_train_log(&kdir, &outcome)?;
        let record = FinetuneKernelRecord {
            kernel_id: kid.clone(),
            k,
            selected,
            final_train_loss: outcome.log.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
        };
        write_json(&kdir.join("finetune.json"), &record)?;
        records.push(record);
        if outcome.diverged {
            return Err(Error::Numerical(format!("fine-tuning diverged on {kid}")));
        }
    }

    let mut manifest = RunManifest::new("finetune", args.seed, &["finetune.batch", "finetune.dropout"])
        .with_config(&args.config_snapshot);
    for kid in &kernel_ids {
        manifest
            .sub_seeds
            .insert(format!("kmeans.{kid}"), seed::sub_seed(args.seed, &format!("kmeans.{kid}")));
    }
    manifest.record_input("data", &args.data)?;
    manifest.record_input("model", &args.model_dir)?;
    manifest.outputs = kernel_ids.iter().map(|k| format!("{k}/")).collect();
    write_manifest(&args.out, &manifest)?;
    Ok(records)
}

/// Regression fine-tuning uses `k`; classification scales it by the
/// configured ratio (the 265:50 analog), capped by availability.
fn effective_budget(cfg: &train::TrainConfig, classification: bool, available: usize) -> usize {
    let k = if classification {
        ((cfg.finetune_k as f64) * cfg.finetune_class_ratio).ceil() as usize
    } else {
        cfg.finetune_k
    };
    k.min(available)
}

// ---------------------------------------------------------------------------
// eval-offline
// ---------------------------------------------------------------------------

pub struct EvalOfflineArgs {
    pub data: PathBuf,
    pub finetuned_dir: PathBuf,
    pub classifier_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub config_snapshot: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
pub struct OfflineReport {
    pub per_kernel: Vec<KernelEval>,
    /// Mean of the per-kernel total MSEs (the headline number).
    pub mean_total_mse: f64,
    /// Sample-weighted total MSE over the union of left-out samples.
    pub pooled_total_mse: f64,
    pub classifier_accuracy: Option<f64>,
}

fn heldout_items(ds: &Dataset, kid: &str, selected: &[usize], classification: bool) -> Result<Vec<TrainItem>> {
    let items = target_items(ds, kid, classification)?;
    let chosen: std::collections::BTreeSet<usize> = selected.iter().copied().collect();
    Ok(items
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, it)| it)
        .collect())
}

pub fn run_eval_offline(args: &EvalOfflineArgs) -> Result<OfflineReport> {
    claim_output_dir(&args.out, args.force)?;
    let ds = dataset::load_dataset(&args.data)?;

    let mut per_kernel = Vec::new();
    let mut pooled_sq = [0.0; crate::cdfg::N_TARGETS];
    let mut pooled_n = 0usize;
    for kernel in ds.suite.targets() {
        let kdir = args.finetuned_dir.join(&kernel.id);
        if !kdir.exists() {
            continue;
        }
        let (model, _, _) = load_model(&kdir)?;
        let record: FinetuneKernelRecord = {
            let raw = std::fs::read(kdir.join("finetune.json"))
                .map_err(|e| Error::io(kdir.join("finetune.json"), e))?;
            serde_json::from_slice(&raw)?
        };
        let heldout = heldout_items(&ds, &kernel.id, &record.selected, false)?;
        let eval = train::eval_offline(&model, &heldout, &kernel.id)?;
        for (acc, per) in pooled_sq.iter_mut().zip(eval.per_target_mse) {
            *acc += per * heldout.len() as f64;
        }
        pooled_n += heldout.len();
        per_kernel.push(eval);
    }
    if per_kernel.is_empty() {
        return Err(Error::data("no fine-tuned kernels found to evaluate"));
    }

    let classifier_accuracy = match &args.classifier_dir {
        None => None,
        Some(dir) => {
            let mut correct_weighted = 0.0;
            let mut total = 0usize;
            for kernel in ds.suite.targets() {
                let kdir = dir.join(&kernel.id);
                if !kdir.exists() {
                    continue;
                }
                let (model, _, _) = load_model(&kdir)?;
                let record: FinetuneKernelRecord = {
                    let raw = std::fs::read(kdir.join("finetune.json"))
                        .map_err(|e| Error::io(kdir.join("finetune.json"), e))?;
                    serde_json::from_slice(&raw)?
                };
                let heldout = heldout_items(&ds, &kernel.id, &record.selected, true)?;
                if heldout.is_empty() {
                    return Err(Error::data(format!(
                        "kernel {}: empty left-out classification set (fine-tune budget consumed every sample)",
                        kernel.id
                    )));
                }
                let metrics = evaluate(&model, &heldout)?;
                let acc = metrics.accuracy.ok_or_else(|| {
                    Error::data(format!("{} is not a classifier directory", dir.display()))
                })?;
                correct_weighted += acc * heldout.len() as f64;
                total += heldout.len();
            }
            (total > 0).then(|| correct_weighted / total as f64)
        }
    };

    let mean_total_mse =
        per_kernel.iter().map(|k| k.total_mse).sum::<f64>() / per_kernel.len() as f64;
    let report = OfflineReport {
        mean_total_mse,
        pooled_total_mse: pooled_sq.iter().map(|s| s / pooled_n as f64).sum(),
        per_kernel,
        classifier_accuracy,
    };
    write_json(&args.out.join(REPORT_FILE), &report)?;

    let mut manifest =
        RunManifest::new("eval-offline", args.seed, &[]).with_config(&args.config_snapshot);
    manifest.record_input("data", &args.data)?;
    manifest.record_input("finetuned", &args.finetuned_dir)?;
    manifest.outputs = vec![REPORT_FILE.into()];
    write_manifest(&args.out, &manifest)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

pub struct SearchArgs {
    pub data: PathBuf,
    pub finetuned_dir: PathBuf,
    pub classifier_dir: PathBuf,
    pub out: PathBuf,
    pub kernel: Option<String>,
    pub budget: SearchBudget,
    pub seed: u64,
    pub force: bool,
    pub config_snapshot: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
pub struct SearchReport {
    pub budget: SearchBudget,
    pub results: Vec<dse::DseResult>,
    pub arith_mean_speedup: f64,
    pub geo_mean_speedup: f64,
}

/// Best labeled design in a fine-tune set (the speedup reference).
pub fn known_best_of_set(ds: &Dataset, kid: &str, selected: &[usize]) -> Result<KnownBest> {
    let (kernel, kd) = ds
        .kernel_data(kid)
        .ok_or_else(|| Error::data(format!("unknown kernel {kid}")))?;
    let mut best: Option<(f64, crate::cdfg::PragmaDesign)> = None;
    for &pos in selected {
        let sample_idx = *kd
            .regression
            .get(pos)
            .ok_or_else(|| Error::data(format!("fine-tune index {pos} out of range for {kid}")))?;
        let sample = &kd.samples[sample_idx];
        let latency = crate::cdfg::denormalize_perf(sample.label.perf);
        match &best {
            Some((lat, _)) if *lat <= latency => {}
            _ => best = Some((latency, sample.design.clone())),
        }
    }
    let (latency, design) = best.ok_or_else(|| Error::data(format!("{kid}: empty fine-tune set")))?;
    Ok(KnownBest { design: design.to_map(&kernel.graph.pragma_slots), latency })
}

pub fn run_search(args: &SearchArgs) -> Result<SearchReport> {
    claim_output_dir(&args.out, args.force)?;
    let ds = dataset::load_dataset(&args.data)?;
    let kernel_ids: Vec<String> = match &args.kernel {
        Some(k) => vec![k.clone()],
        None => ds.suite.targets().map(|k| k.id.clone()).collect(),
    };

    let mut results = Vec::new();
    for kid in &kernel_ids {
        let kernel = ds
            .suite
            .kernel(kid)
            .ok_or_else(|| Error::data(format!("unknown kernel {kid}")))?;
        let (regression, _, _) = load_model(&args.finetuned_dir.join(kid))?;
        let (classifier, _, _) = load_model(&args.classifier_dir.join(kid))?;
        let record: FinetuneKernelRecord = {
            let path = args.finetuned_dir.join(kid).join("finetune.json");
            serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?
        };
        let known = known_best_of_set(&ds, kid, &record.selected)?;
        let predictor = ModelPredictor { regression: &regression, classifier: &classifier };
        results.push(dse::search(kernel, &predictor, &args.budget, &known)?);
    }
    let speedups: Vec<f64> = results.iter().map(|r| r.speedup).collect();
    let (arith, geo) = dse::aggregate(&speedups)?;
    let report = SearchReport {
        budget: args.budget,
        results,
        arith_mean_speedup: arith,
        geo_mean_speedup: geo,
    };
    write_json(&args.out.join("dse-report.json"), &report)?;

    let mut manifest = RunManifest::new("search", args.seed, &[]).with_config(&args.config_snapshot);
    manifest.record_input("data", &args.data)?;
    manifest.record_input("finetuned", &args.finetuned_dir)?;
    manifest.record_input("classifier", &args.classifier_dir)?;
    manifest.outputs = vec!["dse-report.json".into()];
    write_manifest(&args.out, &manifest)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// analyze-gating
// ---------------------------------------------------------------------------

pub struct AnalyzeGatingArgs {
    pub data: PathBuf,
    pub model_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub per_kernel_cap: usize,
    pub config_snapshot: BTreeMap<String, String>,
}

pub fn run_analyze_gating(args: &AnalyzeGatingArgs) -> Result<crate::gating::GatingReport> {
    claim_output_dir(&args.out, args.force)?;
    let ds = dataset::load_dataset(&args.data)?;
    let (model, _, _) = load_model(&args.model_dir)?;
    let report = crate::gating::analyze(&model, &ds, args.per_kernel_cap)?;
    write_json(&args.out.join("gating-report.json"), &report)?;

    let mut manifest =
        RunManifest::new("analyze-gating", args.seed, &[]).with_config(&args.config_snapshot);
    manifest.record_input("data", &args.data)?;
    manifest.record_input("model", &args.model_dir)?;
    manifest.outputs = vec!["gating-report.json".into()];
    write_manifest(&args.out, &manifest)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

pub struct BenchmarkArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub preset: String,
    pub ablations: bool,
    pub config_snapshot: BTreeMap<String, String>,
}

pub fn run_benchmark(args: &BenchmarkArgs) -> Result<BenchmarkReport> {
    claim_output_dir(&args.out, args.force)?;
    let preset = preset_by_name(&args.preset)?;
    let report = run_benchmark_protocol(&preset, args.seed)?;
    write_json(&args.out.join("benchmark.json"), &report)?;
    let md_path = args.out.join("benchmark.md");
    std::fs::write(&md_path, benchmark::render_markdown(&report))
        .map_err(|e| Error::io(&md_path, e))?;

    if args.ablations {
        let ablation = run_ablations(args.seed)?;
        write_json(&args.out.join("ablations.json"), &ablation)?;
        let md_path = args.out.join("ablations.md");
        std::fs::write(&md_path, benchmark::render_ablation_markdown(&ablation))
            .map_err(|e| Error::io(&md_path, e))?;
    }

    let mut manifest = RunManifest::new("benchmark", args.seed, &["motif-lib"])
        .with_config(&args.config_snapshot);
    manifest.outputs = vec!["benchmark.json".into(), "benchmark.md".into()];
    write_manifest(&args.out, &manifest)?;
    Ok(report)
}
