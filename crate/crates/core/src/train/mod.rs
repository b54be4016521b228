//! Pretraining, the two-stage schedule, fine-tune-set selection,
//! fine-tuning, and offline evaluation.

pub mod kmeans;
pub mod polarization;

use crate::cdfg::{Label, N_TARGETS};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::harp::{forward, ForwardOut};
use crate::model::hier::{hier_forward, HierOut};
use crate::model::moe::{cv_of, cv_regularizer};
use crate::model::{EncodedGraph, GraphBatch, HierCfg, HierParams, ModelCfg, ModelParams, OutputKind};
use crate::nn::{AdamHyper, AdamState, LrSchedule, Tape, Tensor, Var};
use crate::seed;
use crate::synthgen::Split;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Fine-tune-set selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    KMeans,
    Random,
}

/// Training hyperparameters and schedule knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// First-stage (warmup) epochs `T` of the two-stage schedule.
    pub warmup_stage_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Linear-warmup window in steps; `None` applies the untuned rule
    /// `2 / (1 - beta2)`.
    pub warmup_steps: Option<u64>,
    /// Early-stopping patience on validation loss, in epochs.
    pub patience: usize,
    pub val_frac: f64,
    pub test_frac: f64,
    pub finetune_k: usize,
    /// Classification fine-tune budget per regression sample (the 265:50
    /// ratio).
    pub finetune_class_ratio: f64,
    pub split: SplitStrategy,
    /// Disabling this trains the hierarchical model end-to-end from epoch 0
    /// (the polarization ablation).
    pub two_stage: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 1000,
            finetune_epochs: 500,
            warmup_stage_epochs: 500,
            alpha: 5e-3,
            beta: 5e-3,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            warmup_steps: None,
            patience: 50,
            val_frac: 0.1,
            test_frac: 0.1,
            finetune_k: 50,
            finetune_class_ratio: 5.3,
            split: SplitStrategy::KMeans,
            two_stage: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_stage_epochs > self.pretrain_epochs {
            return Err(Error::config(format!(
                "warmup stage ({}) longer than pretraining ({})",
                self.warmup_stage_epochs, self.pretrain_epochs
            )));
        }
        if self.val_frac + self.test_frac >= 1.0 {
            return Err(Error::config("val + test fractions must leave training data"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, weight_decay: self.weight_decay, ..AdamHyper::default() }
    }
}

/// Epoch role in the two-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Separate,
    Joint,
}

/// The schedule predicate: separate if `t < T` or `t` is even (epochs are
/// 0-indexed), joint otherwise.
pub fn stage_mode(t: usize, warmup_stage: usize) -> StageMode {
    if t < warmup_stage || t % 2 == 0 {
        StageMode::Separate
    } else {
        StageMode::Joint
    }
}

// ---------------------------------------------------------------------------
// Training data plumbing
// ---------------------------------------------------------------------------

/// One trainable sample: an encoded graph plus its targets.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub graph: Rc<EncodedGraph>,
    pub target: [f64; N_TARGETS],
    /// Validity class (1 = valid).
    pub class: usize,
    pub kernel_id: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TrainItem>,
    pub val: Vec<TrainItem>,
}

fn encode_item(kernel: &crate::synthgen::Kernel, sample: &crate::synthgen::Sample) -> Result<TrainItem> {
    Ok(TrainItem {
        graph: Rc::new(EncodedGraph::new(&kernel.graph, &sample.design)?),
        target: sample.label.to_vec(),
        class: sample.valid as usize,
        kernel_id: kernel.id.clone(),
    })
}

/// Pools the source kernels' regression (or classification) samples and
/// splits them 80/10/10 per kernel. The held-out test slice on source
/// kernels is reserved and unused.
pub fn source_data(ds: &Dataset, cfg: &TrainConfig, classification: bool) -> Result<TrainData> {
    let mut data = TrainData::default();
    for (kernel, kd) in ds.suite.kernels.iter().zip(&ds.per_kernel) {
        if kernel.split != Split::Source {
            continue;
        }
        let mut idx: Vec<usize> = if classification {
            (0..kd.samples.len()).collect()
        } else {
            kd.regression.clone()
        };
        let mut rng = seed::rng(cfg.seed, &format!("split.{}", kernel.id));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = ((n as f64) * cfg.val_frac).floor() as usize;
        let n_test = ((n as f64) * cfg.test_frac).floor() as usize;
        let n_train = n - n_val - n_test;
        for (pos, &i) in idx.iter().enumerate() {
            let item = encode_item(kernel, &kd.samples[i])?;
            if pos < n_train {
                data.train.push(item);
            } else if pos < n_train + n_val {
                data.val.push(item);
            }
            // the rest is the unused source test split
        }
    }
    if data.train.is_empty() {
        return Err(Error::data("no source training samples"));
    }
    Ok(data)
}

/// Regression (or classification) items of one target kernel.
pub fn target_items(ds: &Dataset, kernel_id: &str, classification: bool) -> Result<Vec<TrainItem>> {
    let (kernel, kd) = ds
        .kernel_data(kernel_id)
        .ok_or_else(|| Error::data(format!("unknown kernel {kernel_id}")))?;
    let idx: Vec<usize> = if classification {
        (0..kd.samples.len()).collect()
    } else {
        kd.regression.clone()
    };
    idx.iter().map(|&i| encode_item(kernel, &kd.samples[i])).collect()
}

fn make_batch(items: &[&TrainItem]) -> (GraphBatch, Tensor, Rc<Vec<usize>>) {
    let graphs: Vec<&EncodedGraph> = items.iter().map(|it| it.graph.as_ref()).collect();
    let batch = GraphBatch::new(&graphs);
    let labels = GraphBatch::label_matrix(
        &items
            .iter()
            .map(|it| Label { perf: it.target[0], util: [it.target[1], it.target[2], it.target[3], it.target[4]] })
            .collect::<Vec<_>>(),
    );
    let classes = Rc::new(items.iter().map(|it| it.class).collect());
    (batch, labels, classes)
}

// ---------------------------------------------------------------------------
// Models under training
// ---------------------------------------------------------------------------

/// A single-level or hierarchical model with its stored parameters.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Single(ModelParams<Tensor>),
    Hier(HierParams<Tensor>),
}

impl AnyModel {
    pub fn init_single(cfg: ModelCfg, rng: &mut ChaCha8Rng) -> Self {
        AnyModel::Single(ModelParams::init(cfg, rng))
    }

    pub fn init_hier(cfg: HierCfg, rng: &mut ChaCha8Rng) -> Self {
        AnyModel::Hier(HierParams::init(cfg, rng))
    }

    pub fn outputs(&self) -> OutputKind {
        match self {
            AnyModel::Single(p) => p.cfg.outputs,
            AnyModel::Hier(p) => p.cfg.base.outputs,
        }
    }

    pub fn config_hash(&self) -> u64 {
        match self {
            AnyModel::Single(p) => p.cfg.config_hash(),
            AnyModel::Hier(p) => p.cfg.config_hash(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        match self {
            AnyModel::Single(p) => p.named_tensors(),
            AnyModel::Hier(p) => p.named_tensors(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            AnyModel::Single(p) => p.n_params(),
            AnyModel::Hier(p) => p.n_params(),
        }
    }

    pub fn load_blobs(&mut self, blobs: &[(String, Tensor)]) -> Result<()> {
        match self {
            AnyModel::Single(p) => p.load_blobs(blobs),
            AnyModel::Hier(p) => p.load_blobs(blobs),
        }
    }

    /// Graph representation per item (hierarchical models concatenate the
    /// three experts' representations, matching the gate input).
    pub fn graph_reprs(&self, items: &[TrainItem]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(items.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in items.chunks(EVAL_CHUNK) {
            let refs: Vec<&TrainItem> = chunk.iter().collect();
            let (batch, _, _) = make_batch(&refs);
            let tape = Tape::new();
            let repr = match self {
                AnyModel::Single(p) => {
                    let vars = p.bind(&tape);
                    forward(&tape, &vars, &batch, false, &mut rng).graph_repr
                }
                AnyModel::Hier(p) => {
                    let vars = p.bind(&tape);
                    let outs: Vec<ForwardOut> = vars
                        .experts
                        .iter()
                        .map(|e| forward(&tape, e, &batch, false, &mut rng))
                        .collect();
                    let reprs: Vec<Var> = outs.iter().map(|o| o.graph_repr).collect();
                    tape.concat_cols(&reprs)
                }
            };
            let t = tape.value(repr);
            let d = t.cols();
            for r in 0..t.rows() {
                out.push(t.data()[r * d..(r + 1) * d].to_vec());
            }
        }
        out
    }

    /// Batched eval-mode predictions, one row per item.
    pub fn predict(&self, items: &[TrainItem]) -> Result<Vec<Vec<f64>>> {
        let graphs: Vec<&EncodedGraph> = items.iter().map(|it| it.graph.as_ref()).collect();
        self.predict_encoded(&graphs)
    }

    /// Batched eval-mode predictions over raw encoded graphs.
    pub fn predict_encoded(&self, graphs: &[&EncodedGraph]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(graphs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in graphs.chunks(EVAL_CHUNK) {
            let batch = GraphBatch::new(chunk);
            let tape = Tape::new();
            let pred = match self {
                AnyModel::Single(p) => {
                    let vars = p.bind(&tape);
                    forward(&tape, &vars, &batch, false, &mut rng).pred
                }
                AnyModel::Hier(p) => {
                    let vars = p.bind(&tape);
                    hier_forward(&tape, &vars, &batch, false, &mut rng)?.pred
                }
            };
            let t = tape.value(pred);
            let d = t.cols();
            for r in 0..t.rows() {
                out.push(t.data()[r * d..(r + 1) * d].to_vec());
            }
        }
        Ok(out)
    }

    /// Validity verdicts from a classification-headed model.
    pub fn classify_encoded(&self, graphs: &[&EncodedGraph]) -> Result<Vec<bool>> {
        if self.outputs() != OutputKind::Classification {
            return Err(Error::config("classify_encoded on a regression model"));
        }
        let logits = self.predict_encoded(graphs)?;
        Ok(logits.into_iter().map(|row| row[1] > row[0]).collect())
    }
}

use rand::SeedableRng;

const EVAL_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean of the experts' CV regularizers (`L_R = (L_R1 + L_R2 + L_R3) / 3`).
fn expert_regularizer(tape: &Tape, out: &HierOut) -> Option<Var> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for e in &out.experts {
        if let Some(w) = e.low_gate {
            let (lr, _) = cv_regularizer(tape, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, lr),
                None => lr,
            });
            count += 1;
        }
    }
    acc.map(|a| tape.scale(a, 1.0 / count as f64))
}

/// Loss of a single-level model: total MSE (or cross-entropy for the
/// classifier) plus `alpha * L_R` when the variant has a gate.
pub fn single_loss(
    tape: &Tape,
    out: &ForwardOut,
    labels: &Tensor,
    classes: &Rc<Vec<usize>>,
    outputs: OutputKind,
    alpha: f64,
) -> Var {
    let base = match outputs {
        OutputKind::Regression => tape.total_mse(out.pred, labels),
        OutputKind::Classification => tape.cross_entropy_mean(out.pred, classes.clone()),
    };
    match out.low_gate {
        Some(w) if alpha != 0.0 => {
            let (lr, _) = cv_regularizer(tape, w);
            tape.add(base, tape.scale(lr, alpha))
        }
        _ => base,
    }
}

/// The two-stage loss: separate epochs sum the three per-expert total MSEs,
/// joint epochs use the gate-mixed prediction plus the high-level
/// regularizer. Both include `alpha * mean(L_Ri)` over the low-level gates.
pub fn two_stage_loss(
    tape: &Tape,
    out: &HierOut,
    labels: &Tensor,
    mode: StageMode,
    alpha: f64,
    beta: f64,
) -> Var {
    let mut loss = match mode {
        StageMode::Separate => {
            let mut acc: Option<Var> = None;
            for e in &out.experts {
                let mse = tape.total_mse(e.pred, labels);
                acc = Some(match acc {
                    Some(a) => tape.add(a, mse),
                    None => mse,
                });
            }
            acc.expect("three experts")
        }
        StageMode::Joint => tape.total_mse(out.pred, labels),
    };
    if alpha != 0.0 {
        if let Some(reg) = expert_regularizer(tape, out) {
            loss = tape.add(loss, tape.scale(reg, alpha));
        }
    }
    if mode == StageMode::Joint && beta != 0.0 {
        let (lrh, _) = cv_regularizer(tape, out.gate);
        loss = tape.add(loss, tape.scale(lrh, beta));
    }
    loss
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalMetrics {
    /// Total MSE for regression models, mean cross-entropy for classifiers.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub per_expert_mse: Option<Vec<f64>>,
    pub mean_gate: Option<Vec<f64>>,
    pub gate_cv: Option<f64>,
}

fn mse_of(preds: &[Vec<f64>], items: &[TrainItem]) -> f64 {
    let n = items.len() as f64;
    let mut per_target = [0.0; N_TARGETS];
    for (p, it) in preds.iter().zip(items) {
        for t in 0..N_TARGETS {
            let d = p[t] - it.target[t];
            per_target[t] += d * d;
        }
    }
    per_target.iter().map(|s| s / n).sum()
}

/// Eval-mode metrics over a held-out set.
pub fn evaluate(model: &AnyModel, items: &[TrainItem]) -> Result<EvalMetrics> {
    if items.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match model {
        AnyModel::Single(p) => {
            let mut metrics = EvalMetrics::default();
            match p.cfg.outputs {
                OutputKind::Regression => {
                    let preds = model.predict(items)?;
                    metrics.loss = mse_of(&preds, items);
                }
                OutputKind::Classification => {
                    let mut ce = 0.0;
                    let mut correct = 0usize;
                    for chunk in items.chunks(EVAL_CHUNK) {
                        let refs: Vec<&TrainItem> = chunk.iter().collect();
                        let (batch, _, classes) = make_batch(&refs);
                        let tape = Tape::new();
                        let vars = p.bind(&tape);
                        let out = forward(&tape, &vars, &batch, false, &mut rng);
                        let loss = tape.cross_entropy_mean(out.pred, classes.clone());
                        ce += tape.item(loss) * chunk.len() as f64;
                        let logits = tape.value(out.pred);
                        for (r, it) in chunk.iter().enumerate() {
                            let pred = if logits.at2(r, 1) > logits.at2(r, 0) { 1 } else { 0 };
                            correct += (pred == it.class) as usize;
                        }
                    }
                    metrics.loss = ce / items.len() as f64;
                    metrics.accuracy = Some(correct as f64 / items.len() as f64);
                }
            }
            Ok(metrics)
        }
        AnyModel::Hier(p) => {
            let mut joint: Vec<Vec<f64>> = Vec::with_capacity(items.len());
            let mut per_expert: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
            let mut gate_sum = vec![0.0; 3];
            let mut importance = vec![0.0; 3];
            for chunk in items.chunks(EVAL_CHUNK) {
                let refs: Vec<&TrainItem> = chunk.iter().collect();
                let (batch, _, _) = make_batch(&refs);
                let tape = Tape::new();
                let vars = p.bind(&tape);
                let out = hier_forward(&tape, &vars, &batch, false, &mut rng)?;
                let pred = tape.value(out.pred);
                for r in 0..pred.rows() {
                    joint.push((0..pred.cols()).map(|c| pred.at2(r, c)).collect());
                }
                for (i, e) in out.experts.iter().enumerate() {
                    let t = tape.value(e.pred);
                    for r in 0..t.rows() {
                        per_expert[i].push((0..t.cols()).map(|c| t.at2(r, c)).collect());
                    }
                }
                let g = tape.value(out.gate);
                for r in 0..g.rows() {
                    for c in 0..3 {
                        gate_sum[c] += g.at2(r, c);
                        importance[c] += g.at2(r, c);
                    }
                }
            }
            let n = items.len() as f64;
            Ok(EvalMetrics {
                loss: mse_of(&joint, items),
                accuracy: None,
                per_expert_mse: Some(per_expert.iter().map(|pe| mse_of(pe, items)).collect()),
                mean_gate: Some(gate_sum.iter().map(|s| s / n).collect()),
                gate_cv: Some(cv_of(&importance)),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: StageMode,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub gate_cv: Option<f64>,
    pub mean_gate: Option<Vec<f64>>,
    pub per_expert_val_mse: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: AnyModel,
    pub log: Vec<EpochLog>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub diverged: bool,
}

struct Loop {
    schedule: LrSchedule,
    adam: AdamState,
    hyper: AdamHyper,
    global_step: u64,
}

impl Loop {
    fn new(cfg: &TrainConfig, model: &AnyModel, epochs: usize, steps_per_epoch: usize) -> Self {
        let total_steps = (epochs * steps_per_epoch) as u64;
        let warmup = cfg
            .warmup_steps
            .unwrap_or_else(|| crate::nn::untuned_warmup_steps(AdamHyper::default().beta2));
        let tensors = model.named_tensors();
        Loop {
            schedule: LrSchedule::new(cfg.lr, cfg.min_lr, warmup, total_steps.max(1)),
            adam: AdamState::new(tensors.iter().map(|(_, t)| t)),
            hyper: cfg.hyper(),
            global_step: 0,
        }
    }

    fn apply(&mut self, model: &mut AnyModel, grads: &[Tensor]) {
        let lr = self.schedule.lr(self.global_step.min(self.schedule.total_steps - 1));
        let mut leaves: Vec<&mut Tensor> = Vec::new();
        match model {
            AnyModel::Single(p) => p.leaves_mut(&mut leaves),
            AnyModel::Hier(p) => p.leaves_mut(&mut leaves),
        }
        self.adam.step(&mut leaves, grads, &self.hyper, lr);
        self.global_step += 1;
    }

    fn current_lr(&self) -> f64 {
        self.schedule.lr(self.global_step.min(self.schedule.total_steps - 1))
    }
}

/// Runs one training phase (pretraining or fine-tuning) over `data`.
/// `force_joint` pins every epoch to joint mode (fine-tuning); early
/// stopping applies only when validation data is present.
fn run_training(
    mut model: AnyModel,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    ns: &str,
    force_joint: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("no training samples"));
    }
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let mut lp = Loop::new(cfg, &model, epochs, steps_per_epoch);
    let mut batch_rng = seed::rng(cfg.seed, &format!("{ns}.batch"));
    let mut dropout_rng = seed::rng(cfg.seed, &format!("{ns}.dropout"));

    let mut log = Vec::with_capacity(epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<AnyModel> = None;
    let mut patience_left = cfg.patience;
    let mut diverged = false;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 0..epochs {
        order.shuffle(&mut batch_rng);
        let mode = if force_joint || matches!(model, AnyModel::Single(_)) {
            StageMode::Joint
        } else if cfg.two_stage {
            stage_mode(epoch, cfg.warmup_stage_epochs)
        } else {
            StageMode::Joint
        };

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&TrainItem> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (batch, labels, classes) = make_batch(&items);
            let tape = Tape::new();
            let (loss, grads) = match &model {
                AnyModel::Single(p) => {
                    let vars = p.bind(&tape);
                    let out = forward(&tape, &vars, &batch, true, &mut dropout_rng);
                    let loss = single_loss(&tape, &out, &labels, &classes, p.cfg.outputs, cfg.alpha);
                    tape.backward(loss);
                    (tape.item(loss), vars.grads(&tape))
                }
                AnyModel::Hier(p) => {
                    let vars = p.bind(&tape);
                    let out = hier_forward(&tape, &vars, &batch, true, &mut dropout_rng)?;
                    let loss = two_stage_loss(&tape, &out, &labels, mode, cfg.alpha, cfg.beta);
                    tape.backward(loss);
                    (tape.item(loss), vars.grads(&tape))
                }
            };
            if !loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            lp.apply(&mut model, &grads);
            epoch_loss += loss * items.len() as f64;
        }
        epoch_loss /= data.train.len() as f64;

        let mut entry = EpochLog {
            epoch,
            mode,
            train_loss: epoch_loss,
            val_loss: None,
            lr: lp.current_lr(),
            gate_cv: None,
            mean_gate: None,
            per_expert_val_mse: None,
        };
        if !data.val.is_empty() {
            let metrics = evaluate(&model, &data.val)?;
            entry.val_loss = Some(metrics.loss);
            entry.gate_cv = metrics.gate_cv;
            entry.mean_gate = metrics.mean_gate;
            entry.per_expert_val_mse = metrics.per_expert_mse;
            if metrics.loss < best_val {
                best_val = metrics.loss;
                best_epoch = epoch;
                best_params = Some(model.clone());
                patience_left = cfg.patience;
            } else if patience_left == 0 {
                log.push(entry);
                break;
            } else {
                patience_left -= 1;
            }
        }
        log.push(entry);
    }

    let model = match best_params {
        Some(best) if !data.val.is_empty() => best,
        _ => model,
    };
    Ok(TrainOutcome { model, log, best_val, best_epoch, diverged })
}

/// Pretrains on the source kernels: the two-stage schedule for
/// hierarchical models, the plain schedule otherwise, with early stopping
/// on validation loss.
pub fn pretrain(model: AnyModel, data: &TrainData, cfg: &TrainConfig, ns: &str) -> Result<TrainOutcome> {
    run_training(model, data, cfg, cfg.pretrain_epochs, ns, false)
}

/// Fine-tunes on a target kernel's selected samples: always joint, fresh
/// optimizer state, fixed epoch budget.
pub fn finetune(model: AnyModel, items: &[TrainItem], cfg: &TrainConfig, ns: &str) -> Result<TrainOutcome> {
    let data = TrainData { train: items.to_vec(), val: Vec::new() };
    run_training(model, &data, cfg, cfg.finetune_epochs, ns, true)
}

/// Picks `k` fine-tuning samples: K-means medoids (k-means++ seeding,
/// Lloyd iterations) over the model's graph representations, or a uniform
/// random subset under the random-split ablation.
pub fn select_finetune_set(
    model: &AnyModel,
    items: &[TrainItem],
    k: usize,
    strategy: SplitStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if k > items.len() {
        return Err(Error::data(format!(
            "fine-tune budget {k} exceeds {} available samples",
            items.len()
        )));
    }
    match strategy {
        SplitStrategy::KMeans => {
            let reprs = model.graph_reprs(items);
            Ok(kmeans::kmeans_medoids(&reprs, k, rng))
        }
        SplitStrategy::Random => {
            let mut idx = rand::seq::index::sample(rng, items.len(), k).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Per-kernel offline evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelEval {
    pub kernel_id: String,
    pub n_eval: usize,
    pub total_mse: f64,
    pub per_target_mse: [f64; N_TARGETS],
    pub classifier_accuracy: Option<f64>,
}

/// Total MSE (sum over the five targets of the per-target mean squared
/// error) on the left-out samples of one kernel.
pub fn eval_offline(model: &AnyModel, heldout: &[TrainItem], kernel_id: &str) -> Result<KernelEval> {
    if heldout.is_empty() {
        return Err(Error::data(format!("kernel {kernel_id}: empty left-out set")));
    }
    let preds = model.predict(heldout)?;
    let n = heldout.len() as f64;
    let mut per_target = [0.0; N_TARGETS];
    for (p, it) in preds.iter().zip(heldout) {
        for t in 0..N_TARGETS {
            let d = p[t] - it.target[t];
            per_target[t] += d * d;
        }
    }
    for t in per_target.iter_mut() {
        *t /= n;
    }
    Ok(KernelEval {
        kernel_id: kernel_id.to_string(),
        n_eval: heldout.len(),
        total_mse: per_target.iter().sum(),
        per_target_mse: per_target,
        classifier_accuracy: None,
    })
}
