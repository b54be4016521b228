//! The full offline/online benchmark protocol and its report.
//!
//! For each model family (the plain base model, the three single MoE
//! variants, and the hierarchical model) the protocol pretrains on the
//! source kernels once per offline seed, selects fine-tune samples by
//! K-means, fine-tunes per target kernel, and evaluates held-out MSE.
//! Online evaluation reuses the online-seed runs, filters the design
//! space through the fine-tuned classifier and the 80% resource cap, and
//! scores the top-10 designs against the oracle. Speedups are averaged per
//! kernel over the online seeds, then aggregated arithmetically and
//! geometrically.

use crate::config::ModelSpec;
use crate::dataset::{build_dataset, Dataset, GenScale};
use crate::dse::{self, KnownBest, ModelPredictor, OraclePredictor, SearchBudget};
use crate::error::{Error, Result};
use crate::model::{BlockVariant, GateDesign, HierCfg, HierExperts, ModelCfg, OutputKind, Variant};
use crate::pipeline::init_model;
use crate::seed;
use crate::train::{
    evaluate, eval_offline, finetune, pretrain, select_finetune_set, source_data, target_items,
    AnyModel, SplitStrategy, TrainConfig, TrainItem,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkPreset {
    pub name: String,
    pub n_source: usize,
    pub n_target: usize,
    pub scale: GenScale,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub experts: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub warmup_stage_epochs: usize,
    pub classifier_epochs: usize,
    pub patience: usize,
    pub warmup_steps: u64,
    pub finetune_k: usize,
    pub offline_seeds: Vec<u64>,
    pub online_seeds: Vec<u64>,
    pub budget: SearchBudget,
    /// Also fine-tune with a random split and report the degradation.
    pub random_split_rows: bool,
}

/// Desk-scale preset: the full protocol shape (12/3 kernels, 5 offline and
/// 3 online seeds) at sizes a laptop core handles in well under two hours.
pub fn desk_preset() -> BenchmarkPreset {
    BenchmarkPreset {
        name: "desk".into(),
        n_source: 12,
        n_target: 3,
        scale: GenScale { regre_source: 100, regre_target: 120, class_ratio: 4.0 },
        hidden: 32,
        encoder_layers: 6,
        experts: 4,
        pretrain_epochs: 60,
        finetune_epochs: 40,
        warmup_stage_epochs: 30,
        classifier_epochs: 20,
        patience: 15,
        warmup_steps: 100,
        finetune_k: 50,
        offline_seeds: vec![1, 2, 3, 4, 5],
        online_seeds: vec![1, 2, 3],
        budget: SearchBudget { max_designs: 6_000, top_k: 10 },
        random_split_rows: true,
    }
}

/// Micro smoke preset: a 4-source / 2-target suite, minutes end to end.
pub fn tiny_preset() -> BenchmarkPreset {
    BenchmarkPreset {
        name: "tiny".into(),
        n_source: 4,
        n_target: 2,
        scale: GenScale { regre_source: 60, regre_target: 60, class_ratio: 3.0 },
        hidden: 16,
        encoder_layers: 6,
        experts: 2,
        pretrain_epochs: 20,
        finetune_epochs: 12,
        warmup_stage_epochs: 10,
        classifier_epochs: 10,
        patience: 10,
        warmup_steps: 40,
        finetune_k: 30,
        offline_seeds: vec![1, 2, 3, 4, 5],
        online_seeds: vec![1, 2, 3],
        budget: SearchBudget { max_designs: 1_500, top_k: 10 },
        random_split_rows: true,
    }
}

/// Paper-scale preset: default data calibration and the published
/// hyperparameters (hidden 64, 1000/500 epochs, 75k search budget).
/// Expect many hours of CPU time.
pub fn full_preset() -> BenchmarkPreset {
    BenchmarkPreset {
        name: "full".into(),
        n_source: 12,
        n_target: 3,
        scale: GenScale::default(),
        hidden: 64,
        encoder_layers: 6,
        experts: 4,
        pretrain_epochs: 1000,
        finetune_epochs: 500,
        warmup_stage_epochs: 500,
        classifier_epochs: 200,
        patience: 50,
        warmup_steps: 2000,
        finetune_k: 50,
        offline_seeds: vec![1, 2, 3, 4, 5],
        online_seeds: vec![1, 2, 3],
        budget: SearchBudget::default(),
        random_split_rows: true,
    }
}

pub fn preset_by_name(name: &str) -> Result<BenchmarkPreset> {
    match name {
        "desk" => Ok(desk_preset()),
        "tiny" => Ok(tiny_preset()),
        "full" => Ok(full_preset()),
        other => Err(Error::config(format!("unknown benchmark preset `{other}`"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub category: String,
    pub model: String,
    pub offline_per_seed: Vec<f64>,
    pub offline_mean: f64,
    pub offline_std: f64,
    pub random_split_mean: Option<f64>,
    /// `random_split_mean / offline_mean`.
    pub degradation_ratio: Option<f64>,
    /// Offline MSE per target kernel, averaged over the offline seeds.
    pub per_kernel_offline: BTreeMap<String, f64>,
    pub per_kernel_speedup: BTreeMap<String, f64>,
    pub avg_speedup: Option<f64>,
    pub geo_speedup: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerfectSurrogateRow {
    pub kernel_id: String,
    pub space_size: u64,
    pub speedup: f64,
    pub brute_force_speedup: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub preset: BenchmarkPreset,
    pub data_seed: u64,
    pub target_kernels: Vec<String>,
    pub rows: Vec<BenchRow>,
    pub classifier_accuracy: Option<f64>,
    pub perfect_surrogate: Vec<PerfectSurrogateRow>,
}

impl BenchmarkReport {
    pub fn row(&self, model: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

const FAMILIES: [(&str, &str); 5] = [
    ("No MoE", "HARP"),
    ("Single MoE", "Node MoE"),
    ("Single MoE", "Block MoE"),
    ("Single MoE", "Graph MoE"),
    ("Hierarchical MoE", "Hierarchical MoE"),
];

fn family_spec(model: &str, preset: &BenchmarkPreset, f_in: usize) -> ModelSpec {
    let base = ModelCfg {
        f_in,
        hidden: preset.hidden,
        encoder_layers: preset.encoder_layers,
        dropout: 0.1,
        experts: preset.experts,
        variant: Variant::Harp,
        block_variant: BlockVariant::Standard,
        outputs: OutputKind::Regression,
    };
    match model {
        "HARP" => ModelSpec::Single(base),
        "Node MoE" => ModelSpec::Single(ModelCfg { variant: Variant::NodeMoe, ..base }),
        "Block MoE" => ModelSpec::Single(ModelCfg { variant: Variant::BlockMoe, ..base }),
        "Graph MoE" => ModelSpec::Single(ModelCfg { variant: Variant::GraphMoe, ..base }),
        "Hierarchical MoE" => ModelSpec::Hier(HierCfg {
            base: ModelCfg { variant: Variant::NodeMoe, ..base },
            gate_design: GateDesign::HiddenConcat,
            experts_mix: HierExperts::Mixed,
            constant_gate_init: true,
        }),
        other => unreachable!("unknown family {other}"),
    }
}

fn train_cfg(preset: &BenchmarkPreset, run_seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: preset.pretrain_epochs,
        finetune_epochs: preset.finetune_epochs,
        warmup_stage_epochs: preset.warmup_stage_epochs,
        patience: preset.patience,
        warmup_steps: Some(preset.warmup_steps),
        finetune_k: preset.finetune_k,
        seed: run_seed,
        ..TrainConfig::default()
    }
}

/// One fine-tuned kernel within a family/seed run.
struct KernelRun {
    kernel_id: String,
    model: AnyModel,
    known_best: KnownBest,
    mse: f64,
}

struct FamilySeedRun {
    mean_mse: f64,
    random_mean_mse: Option<f64>,
    kernels: Vec<KernelRun>,
}

fn run_family_seed(
    ds: &Dataset,
    spec: &ModelSpec,
    preset: &BenchmarkPreset,
    run_seed: u64,
    family: &str,
) -> Result<FamilySeedRun> {
    let cfg = train_cfg(preset, run_seed);
    let ns = format!("{family}.s{run_seed}");
    let data = source_data(ds, &cfg, false)?;
    let model = init_model(spec, run_seed, &ns);
    let pre = pretrain(model, &data, &cfg, &ns)?;
    if pre.diverged {
        return Err(Error::Numerical(format!("{ns}: pretraining diverged")));
    }

    let mut kernels = Vec::new();
    let mut mse_sum = 0.0;
    let mut random_sum = 0.0;
    for kernel in ds.suite.targets() {
        let items = target_items(ds, &kernel.id, false)?;
        let k = preset.finetune_k.min(items.len());
        let mut rng = seed::rng(run_seed, &format!("{ns}.kmeans.{}", kernel.id));
        let selected = select_finetune_set(&pre.model, &items, k, SplitStrategy::KMeans, &mut rng)?;
        let train_items: Vec<TrainItem> = selected.iter().map(|&i| items[i].clone()).collect();
        let ft = finetune(pre.model.clone(), &train_items, &cfg, &format!("{ns}.ft.{}", kernel.id))?;
        if ft.diverged {
            return Err(Error::Numerical(format!("{ns}: fine-tuning diverged on {}", kernel.id)));
        }
        let chosen: std::collections::BTreeSet<usize> = selected.iter().copied().collect();
        let heldout: Vec<TrainItem> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(_, it)| it.clone())
            .collect();
        let eval = eval_offline(&ft.model, &heldout, &kernel.id)?;
        mse_sum += eval.total_mse;

        let random_mse = if preset.random_split_rows {
            let mut rng = seed::rng(run_seed, &format!("{ns}.random.{}", kernel.id));
            let rnd = select_finetune_set(&pre.model, &items, k, SplitStrategy::Random, &mut rng)?;
            let rnd_items: Vec<TrainItem> = rnd.iter().map(|&i| items[i].clone()).collect();
            let ft_r = finetune(pre.model.clone(), &rnd_items, &cfg, &format!("{ns}.ftr.{}", kernel.id))?;
            let rnd_set: std::collections::BTreeSet<usize> = rnd.iter().copied().collect();
            let heldout_r: Vec<TrainItem> = items
                .iter()
                .enumerate()
                .filter(|(i, _)| !rnd_set.contains(i))
                .map(|(_, it)| it.clone())
                .collect();
            let ev = eval_offline(&ft_r.model, &heldout_r, &kernel.id)?;
            random_sum += ev.total_mse;
            Some(ev.total_mse)
        } else {
            None
        };

        let _ = random_mse;
        let known_best = known_best_from_items(ds, &kernel.id, &selected)?;
        kernels.push(KernelRun {
            kernel_id: kernel.id.clone(),
            model: ft.model,
            known_best,
            mse: eval.total_mse,
        });
    }
    let n = kernels.len() as f64;
    Ok(FamilySeedRun {
        mean_mse: mse_sum / n,
        random_mean_mse: preset.random_split_rows.then_some(random_sum / n),
        kernels,
    })
}

/// Best labeled design among the selected fine-tune samples.
fn known_best_from_items(ds: &Dataset, kid: &str, selected: &[usize]) -> Result<KnownBest> {
    crate::pipeline::known_best_of_set(ds, kid, selected)
}

/// Fine-tuned classifier per target kernel for one online seed.
struct ClassifierRun {
    per_kernel: BTreeMap<String, AnyModel>,
    accuracy: f64,
}

fn run_classifier_seed(ds: &Dataset, preset: &BenchmarkPreset, run_seed: u64) -> Result<ClassifierRun> {
    let mut cfg = train_cfg(preset, run_seed);
    cfg.pretrain_epochs = preset.classifier_epochs;
    cfg.finetune_epochs = preset.classifier_epochs.max(8);
    let ns = format!("classifier.s{run_seed}");
    let f_in = ds.suite.kernels[0].graph.layout.width();
    let spec = ModelSpec::Single(ModelCfg {
        f_in,
        hidden: preset.hidden,
        encoder_layers: preset.encoder_layers,
        dropout: 0.1,
        experts: preset.experts,
        variant: Variant::Harp,
        block_variant: BlockVariant::Standard,
        outputs: OutputKind::Classification,
    });
    let data = source_data(ds, &cfg, true)?;
    let model = init_model(&spec, run_seed, &ns);
    let pre = pretrain(model, &data, &cfg, &ns)?;
    if pre.diverged {
        return Err(Error::Numerical(format!("{ns}: classifier pretraining diverged")));
    }

    let class_k = ((preset.finetune_k as f64) * cfg.finetune_class_ratio).ceil() as usize;
    let mut per_kernel = BTreeMap::new();
    let mut correct_weighted = 0.0;
    let mut total = 0usize;
    for kernel in ds.suite.targets() {
        let items = target_items(ds, &kernel.id, true)?;
        let k = class_k.min(items.len());
        let mut rng = seed::rng(run_seed, &format!("{ns}.kmeans.{}", kernel.id));
        let selected = select_finetune_set(&pre.model, &items, k, SplitStrategy::KMeans, &mut rng)?;
        let train_items: Vec<TrainItem> = selected.iter().map(|&i| items[i].clone()).collect();
        let ft = finetune(pre.model.clone(), &train_items, &cfg, &format!("{ns}.ft.{}", kernel.id))?;
        let chosen: std::collections::BTreeSet<usize> = selected.iter().copied().collect();
        let heldout: Vec<TrainItem> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(_, it)| it.clone())
            .collect();
        let metrics = evaluate(&ft.model, &heldout)?;
        let acc = metrics.accuracy.expect("classifier eval has accuracy");
        correct_weighted += acc * heldout.len() as f64;
        total += heldout.len();
        per_kernel.insert(kernel.id.clone(), ft.model);
    }
    Ok(ClassifierRun { per_kernel, accuracy: correct_weighted / total as f64 })
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Runs the whole protocol and assembles the report.
pub fn run_benchmark_protocol(preset: &BenchmarkPreset, data_seed: u64) -> Result<BenchmarkReport> {
    let ds = build_dataset(data_seed, preset.n_source, preset.n_target, false, &preset.scale)?;
    let f_in = ds.suite.kernels[0].graph.layout.width();
    let target_kernels: Vec<String> = ds.suite.targets().map(|k| k.id.clone()).collect();

    // fine-tuned classifiers for the online seeds
    let mut classifiers: BTreeMap<u64, ClassifierRun> = BTreeMap::new();
    for &s in &preset.online_seeds {
        eprintln!("[benchmark] classifier seed {s}");
        classifiers.insert(s, run_classifier_seed(&ds, preset, s)?);
    }
    let classifier_accuracy = (!classifiers.is_empty()).then(|| {
        classifiers.values().map(|c| c.accuracy).sum::<f64>() / classifiers.len() as f64
    });

    let mut rows = Vec::new();
    for (category, model_name) in FAMILIES {
        let spec = family_spec(model_name, preset, f_in);
        let mut offline_per_seed = Vec::new();
        let mut random_per_seed = Vec::new();
        let mut per_kernel_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut online_runs: BTreeMap<u64, FamilySeedRun> = BTreeMap::new();
        for &s in &preset.offline_seeds {
            eprintln!("[benchmark] {model_name} seed {s}");
            let run = run_family_seed(&ds, &spec, preset, s, model_name)?;
            offline_per_seed.push(run.mean_mse);
            if let Some(r) = run.random_mean_mse {
                random_per_seed.push(r);
            }
            for kr in &run.kernels {
                *per_kernel_sums.entry(kr.kernel_id.clone()).or_insert(0.0) += kr.mse;
            }
            if preset.online_seeds.contains(&s) {
                online_runs.insert(s, run);
            }
        }
        let n_off = preset.offline_seeds.len() as f64;
        let per_kernel_offline: BTreeMap<String, f64> =
            per_kernel_sums.into_iter().map(|(k, v)| (k, v / n_off)).collect();
        let offline_mean = offline_per_seed.iter().sum::<f64>() / offline_per_seed.len() as f64;
        let offline_std = sample_std(&offline_per_seed, offline_mean);
        let random_split_mean = (!random_per_seed.is_empty())
            .then(|| random_per_seed.iter().sum::<f64>() / random_per_seed.len() as f64);

        // online: per-kernel mean speedup over the online seeds
        let mut per_kernel_speedup = BTreeMap::new();
        for kid in &target_kernels {
            let kernel = ds.suite.kernel(kid).expect("kernel exists");
            let mut acc = 0.0;
            let mut n = 0usize;
            for (&s, run) in &online_runs {
                let kr = run
                    .kernels
                    .iter()
                    .find(|k| &k.kernel_id == kid)
                    .expect("kernel run exists");
                let classifier = &classifiers[&s].per_kernel[kid];
                let predictor = ModelPredictor { regression: &kr.model, classifier };
                let result = dse::search(kernel, &predictor, &preset.budget, &kr.known_best)?;
                acc += result.speedup;
                n += 1;
            }
            if n > 0 {
                per_kernel_speedup.insert(kid.clone(), acc / n as f64);
            }
        }
        let (avg_speedup, geo_speedup) = if per_kernel_speedup.is_empty() {
            (None, None)
        } else {
            let speedups: Vec<f64> = per_kernel_speedup.values().copied().collect();
            let (a, g) = dse::aggregate(&speedups)?;
            (Some(a), Some(g))
        };

        rows.push(BenchRow {
            category: category.to_string(),
            model: model_name.to_string(),
            offline_mean,
            offline_std,
            degradation_ratio: random_split_mean.map(|r| r / offline_mean),
            random_split_mean,
            offline_per_seed,
            per_kernel_offline,
            per_kernel_speedup,
            avg_speedup,
            geo_speedup,
        });
    }

    // perfect-surrogate control on kernels with exhaustively coverable spaces
    let mut perfect = Vec::new();
    for kernel in &ds.suite.kernels {
        if kernel.space_size > 10_000 || perfect.len() >= 2 {
            continue;
        }
        let (kd_idx, _) = match ds.kernel_data(&kernel.id) {
            Some(x) => x,
            None => continue,
        };
        let _ = kd_idx;
        let known = dataset_best(&ds, &kernel.id)?;
        let budget = SearchBudget { max_designs: kernel.space_size, top_k: preset.budget.top_k };
        let result = dse::search(kernel, &OraclePredictor, &budget, &known)?;
        let brute = dse::brute_force_best(kernel);
        let brute_speedup = match brute {
            Some((_, lat)) => dse::speedup(lat.min(known.latency), known.latency)?,
            None => 1.0,
        };
        perfect.push(PerfectSurrogateRow {
            kernel_id: kernel.id.clone(),
            space_size: kernel.space_size,
            exact: (result.speedup - brute_speedup).abs() < 1e-12,
            speedup: result.speedup,
            brute_force_speedup: brute_speedup,
        });
    }

    Ok(BenchmarkReport {
        preset: preset.clone(),
        data_seed,
        target_kernels,
        rows,
        classifier_accuracy,
        perfect_surrogate: perfect,
    })
}

/// Best valid labeled design of a kernel's regression dataset.
fn dataset_best(ds: &Dataset, kid: &str) -> Result<KnownBest> {
    let (kernel, kd) = ds
        .kernel_data(kid)
        .ok_or_else(|| Error::data(format!("unknown kernel {kid}")))?;
    let mut best: Option<(f64, &crate::synthgen::Sample)> = None;
    for &i in &kd.regression {
        let s = &kd.samples[i];
        let lat = crate::cdfg::denormalize_perf(s.label.perf);
        match best {
            Some((b, _)) if b <= lat => {}
            _ => best = Some((lat, s)),
        }
    }
    let (latency, sample) = best.ok_or_else(|| Error::data(format!("{kid}: no labeled designs")))?;
    Ok(KnownBest { design: sample.design.to_map(&kernel.graph.pragma_slots), latency })
}

pub fn render_markdown(report: &BenchmarkReport) -> String {
    let mut md = String::new();
    md.push_str(&format!(
        "# Benchmark report ({} preset, data seed {})\n\n",
        report.preset.name, report.data_seed
    ));
    md.push_str(&format!(
        "Offline seeds: {:?}; online seeds: {:?}; search budget {} designs, top {}.\n\n",
        report.preset.offline_seeds,
        report.preset.online_seeds,
        report.preset.budget.max_designs,
        report.preset.budget.top_k
    ));

    md.push_str("| MoE category | Model | Offline Total MSE |");
    for k in &report.target_kernels {
        md.push_str(&format!(" {k} |"));
    }
    md.push_str(" Average | Geo mean |\n");
    md.push_str("|---|---|---|");
    for _ in &report.target_kernels {
        md.push_str("---|");
    }
    md.push_str("---|---|\n");
    for row in &report.rows {
        md.push_str(&format!(
            "| {} | {} | {:.3} ± {:.3} |",
            row.category, row.model, row.offline_mean, row.offline_std
        ));
        for k in &report.target_kernels {
            match row.per_kernel_speedup.get(k) {
                Some(s) => md.push_str(&format!(" {s:.2} |")),
                None => md.push_str(" - |"),
            }
        }
        match (row.avg_speedup, row.geo_speedup) {
            (Some(a), Some(g)) => md.push_str(&format!(" {a:.2} | {g:.2} |\n")),
            _ => md.push_str(" - | - |\n"),
        }
    }

    if report.rows.iter().any(|r| r.random_split_mean.is_some()) {
        md.push_str("\n## K-means vs random fine-tune split (offline MSE)\n\n");
        md.push_str("| Model | K-means | Random | Degradation |\n|---|---|---|---|\n");
        for row in &report.rows {
            if let (Some(r), Some(d)) = (row.random_split_mean, row.degradation_ratio) {
                md.push_str(&format!(
                    "| {} | {:.3} | {:.3} | {:.2}x |\n",
                    row.model, row.offline_mean, r, d
                ));
            }
        }
    }

    if let Some(acc) = report.classifier_accuracy {
        md.push_str(&format!(
            "\nFine-tuned validity classifier accuracy (held-out): {:.1}%\n",
            100.0 * acc
        ));
    }
    if !report.perfect_surrogate.is_empty() {
        md.push_str("\n## Perfect-surrogate control\n\n");
        md.push_str("| Kernel | Space | Speedup | Brute force | Exact |\n|---|---|---|---|---|\n");
        for p in &report.perfect_surrogate {
            md.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {} |\n",
                p.kernel_id, p.space_size, p.speedup, p.brute_force_speedup, p.exact
            ));
        }
    }
    md
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub offline_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSection {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub sections: Vec<AblationSection>,
}

impl AblationReport {
    pub fn section(&self, name: &str) -> Option<&AblationSection> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Offline MSE of one spec at micro scale (single seed).
fn ablation_mse(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, ns: &str, split: SplitStrategy) -> Result<f64> {
    let data = source_data(ds, cfg, false)?;
    let model = init_model(spec, cfg.seed, ns);
    let pre = pretrain(model, &data, cfg, ns)?;
    let mut mse_sum = 0.0;
    let mut n = 0usize;
    for kernel in ds.suite.targets() {
        let items = target_items(ds, &kernel.id, false)?;
        let k = cfg.finetune_k.min(items.len());
        let mut rng = seed::rng(cfg.seed, &format!("{ns}.select.{}", kernel.id));
        let selected = select_finetune_set(&pre.model, &items, k, split, &mut rng)?;
        let train_items: Vec<TrainItem> = selected.iter().map(|&i| items[i].clone()).collect();
        let ft = finetune(pre.model.clone(), &train_items, cfg, &format!("{ns}.ft.{}", kernel.id))?;
        let chosen: std::collections::BTreeSet<usize> = selected.iter().copied().collect();
        let heldout: Vec<TrainItem> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(_, it)| it.clone())
            .collect();
        mse_sum += eval_offline(&ft.model, &heldout, &kernel.id)?.total_mse;
        n += 1;
    }
    Ok(mse_sum / n as f64)
}

/// Runs every ablation hook at micro scale and collects one report row per
/// configuration: single-granularity hierarchies, block-MoE structural
/// variants, both gate designs, K-means vs random split, and expert counts.
pub fn run_ablations(data_seed: u64) -> Result<AblationReport> {
    let scale = GenScale { regre_source: 60, regre_target: 60, class_ratio: 2.0 };
    let ds = build_dataset(data_seed, 4, 2, false, &scale)?;
    let f_in = ds.suite.kernels[0].graph.layout.width();
    let base = ModelCfg {
        f_in,
        hidden: 16,
        encoder_layers: 6,
        dropout: 0.1,
        experts: 2,
        variant: Variant::Harp,
        block_variant: BlockVariant::Standard,
        outputs: OutputKind::Regression,
    };
    let cfg = TrainConfig {
        pretrain_epochs: 12,
        finetune_epochs: 8,
        warmup_stage_epochs: 6,
        patience: 12,
        warmup_steps: Some(30),
        finetune_k: 25,
        seed: 1,
        ..TrainConfig::default()
    };
    let hier = |mix: HierExperts, gate: GateDesign| {
        ModelSpec::Hier(HierCfg {
            base: ModelCfg { variant: Variant::NodeMoe, ..base },
            gate_design: gate,
            experts_mix: mix,
            constant_gate_init: true,
        })
    };

    let mut sections = Vec::new();

    let mut rows = Vec::new();
    for (label, mix) in [
        ("node", HierExperts::Node),
        ("block", HierExperts::Block),
        ("graph", HierExperts::Graph),
        ("all", HierExperts::Mixed),
    ] {
        let mse = ablation_mse(&ds, &hier(mix, GateDesign::HiddenConcat), &cfg, &format!("abl.hier.{label}"), SplitStrategy::KMeans)?;
        rows.push(AblationRow { config: label.into(), offline_mse: mse });
    }
    sections.push(AblationSection { name: "hier_granularity".into(), rows });

    let mut rows = Vec::new();
    for (label, bv) in [
        ("block_moe", BlockVariant::Standard),
        ("block_moe_gnn", BlockVariant::KeepPostGnn),
        ("block_moe_gnn_pooling", BlockVariant::KeepPostGnnDualPool),
    ] {
        let spec = ModelSpec::Single(ModelCfg {
            variant: Variant::BlockMoe,
            block_variant: bv,
            ..base
        });
        let mse = ablation_mse(&ds, &spec, &cfg, &format!("abl.bv.{label}"), SplitStrategy::KMeans)?;
        rows.push(AblationRow { config: label.into(), offline_mse: mse });
    }
    sections.push(AblationSection { name: "block_variants".into(), rows });

    let mut rows = Vec::new();
    for (label, gate) in [
        ("hidden_concat", GateDesign::HiddenConcat),
        ("input_pooling", GateDesign::InputPooling),
    ] {
        let mse = ablation_mse(&ds, &hier(HierExperts::Mixed, gate), &cfg, &format!("abl.gate.{label}"), SplitStrategy::KMeans)?;
        rows.push(AblationRow { config: label.into(), offline_mse: mse });
    }
    sections.push(AblationSection { name: "gate_designs".into(), rows });

    let mut rows = Vec::new();
    for (label, split) in [("kmeans", SplitStrategy::KMeans), ("random", SplitStrategy::Random)] {
        let mse = ablation_mse(&ds, &hier(HierExperts::Mixed, GateDesign::HiddenConcat), &cfg, &format!("abl.split.{label}"), split)?;
        rows.push(AblationRow { config: label.into(), offline_mse: mse });
    }
    sections.push(AblationSection { name: "split_strategy".into(), rows });

    let mut rows = Vec::new();
    for variant in [Variant::NodeMoe, Variant::BlockMoe, Variant::GraphMoe] {
        for n in [2usize, 4, 8, 12] {
            let spec = ModelSpec::Single(ModelCfg { variant, experts: n, ..base });
            let mse = ablation_mse(
                &ds,
                &spec,
                &cfg,
                &format!("abl.experts.{}.{n}", variant.name()),
                SplitStrategy::KMeans,
            )?;
            rows.push(AblationRow {
                config: format!("{}:{n}", variant.name()),
                offline_mse: mse,
            });
        }
    }
    sections.push(AblationSection { name: "expert_counts".into(), rows });

    Ok(AblationReport { sections })
}

pub fn render_ablation_markdown(report: &AblationReport) -> String {
    let mut md = String::from("# Ablation report (micro scale, single seed)\n");
    for section in &report.sections {
        md.push_str(&format!("\n## {}\n\n| Config | Offline MSE |\n|---|---|\n", section.name));
        for row in &section.rows {
            md.push_str(&format!("| {} | {:.3} |\n", row.config, row.offline_mse));
        }
    }
    md
}
