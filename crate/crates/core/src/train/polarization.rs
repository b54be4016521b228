//! Polarization fixture: a hierarchical model whose three experts have an
//! engineered convergence-speed gap.
//!
//! The three experts are structural copies of the graph-granularity model,
//! but experts 1 and 2 start from parameters scaled close to zero, so
//! expert 0 converges much faster. Training end-to-end from epoch 0 with a
//! randomly initialized high-level gate reproduces expert polarization;
//! the two-stage schedule with constant gate initialization keeps the
//! mixture balanced and every expert individually trained.

use super::{evaluate, pretrain, source_data, AnyModel, SplitStrategy, TrainConfig};
use crate::dataset::{build_dataset, GenScale};
use crate::error::Result;
use crate::model::{GateDesign, HierCfg, HierExperts, HierParams, ModelCfg, Variant};
use crate::nn::Tensor;
use crate::seed;
use rand::SeedableRng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct PolarizationReport {
    pub mean_gate: Vec<f64>,
    pub max_mean_gate: f64,
    pub joint_total_mse: f64,
    pub per_expert_total_mse: Vec<f64>,
    pub two_stage: bool,
    pub constant_init: bool,
}

/// Fixture knobs. The slow-expert scale is transient by design: individual
/// (separate-mode) training heals the handicapped experts, while
/// end-to-end training from epoch 0 lets the fast expert capture the gate
/// before they recover.
#[derive(Debug, Clone)]
pub struct PolarizationFixture {
    pub fast_expert_scale: f64,
    pub slow_expert_scale: f64,
    pub beta: f64,
    pub epochs: usize,
    pub warmup_stage: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Decay the learning rate with the cosine schedule (otherwise hold it
    /// constant after warmup).
    pub cosine_decay: bool,
    /// Train on a single kernel's samples (homogeneous inputs polarize the
    /// gate more coherently).
    pub single_kernel: bool,
    pub mixed_experts: bool,
    pub input_pooling_gate: bool,
    pub hidden: usize,
    pub n_source: usize,
}

impl Default for PolarizationFixture {
    fn default() -> Self {
        PolarizationFixture {
            fast_expert_scale: 0.3,
            slow_expert_scale: 0.01,
            beta: 1e-3,
            epochs: 160,
            warmup_stage: 120,
            lr: 2e-3,
            batch_size: 8,
            cosine_decay: true,
            single_kernel: false,
            mixed_experts: false,
            input_pooling_gate: false,
            hidden: 12,
            n_source: 3,
        }
    }
}

/// Scales only the output heads: the handicapped experts start out
/// predicting near zero (far from the labels), but their intact trunks let
/// individual training heal them completely.
fn scale_expert_heads(params: &mut crate::model::ModelParams<Tensor>, factor: f64) {
    let mut leaves = Vec::new();
    params.output.leaves_mut(&mut leaves);
    for t in leaves {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

/// Trains the fixture and reports the mean high-level gate assignment plus
/// joint / per-expert MSEs on the validation split.
pub fn run_polarization_with(
    fixture: &PolarizationFixture,
    two_stage: bool,
    constant_init: bool,
    seed: u64,
) -> Result<PolarizationReport> {
    let ds = build_dataset(
        seed::sub_seed(seed, "polarization-suite"),
        fixture.n_source,
        1,
        false,
        &GenScale { regre_source: 60, regre_target: 30, class_ratio: 1.5 },
    )?;
    let f_in = ds.suite.kernels[0].graph.layout.width();

    let cfg = TrainConfig {
        pretrain_epochs: fixture.epochs,
        warmup_stage_epochs: fixture.warmup_stage,
        finetune_epochs: 0,
        beta: fixture.beta,
        batch_size: fixture.batch_size,
        lr: fixture.lr,
        min_lr: if fixture.cosine_decay { 1e-5 } else { fixture.lr },
        warmup_steps: Some(20),
        patience: usize::MAX,
        val_frac: 0.15,
        test_frac: 0.0,
        split: SplitStrategy::KMeans,
        two_stage,
        seed,
        ..TrainConfig::default()
    };
    let data = if fixture.single_kernel {
        let items = crate::train::target_items(&ds, "src00", false)?;
        let n_val = items.len() / 6;
        crate::train::TrainData {
            train: items[n_val..].to_vec(),
            val: items[..n_val].to_vec(),
        }
    } else {
        source_data(&ds, &cfg, false)?
    };

    let hier_cfg = HierCfg {
        base: ModelCfg {
            hidden: fixture.hidden,
            encoder_layers: 2,
            experts: 2,
            ..ModelCfg::new(f_in, Variant::GraphMoe)
        },
        gate_design: if fixture.input_pooling_gate {
            GateDesign::InputPooling
        } else {
            GateDesign::HiddenConcat
        },
        experts_mix: if fixture.mixed_experts { HierExperts::Mixed } else { HierExperts::Graph },
        constant_gate_init: constant_init,
    };
    let mut params = HierParams::init(hier_cfg, &mut seed::rng(seed, "polarization-init"));
    scale_expert_heads(&mut params.experts[0], fixture.fast_expert_scale);
    scale_expert_heads(&mut params.experts[1], fixture.slow_expert_scale);
    scale_expert_heads(&mut params.experts[2], fixture.slow_expert_scale);

    let outcome = pretrain(AnyModel::Hier(params), &data, &cfg, "polarization")?;
    if std::env::var("HIERMOE_POLAR_DEBUG").is_ok() {
        if let AnyModel::Hier(p) = &outcome.model {
            let mut g0: Vec<f64> = Vec::new();
            for chunk in data.val.chunks(64) {
                let graphs: Vec<&crate::model::EncodedGraph> =
                    chunk.iter().map(|it| it.graph.as_ref()).collect();
                let batch = crate::model::GraphBatch::new(&graphs);
                let tape = crate::nn::Tape::new();
                let vars = p.bind(&tape);
                let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let out = crate::model::hier::hier_forward(&tape, &vars, &batch, false, &mut r)?;
                let g = tape.value(out.gate);
                for row in 0..g.rows() {
                    let m = (0..3).map(|c| g.at2(row, c)).fold(f64::MIN, f64::max);
                    g0.push(m);
                }
            }
            g0.sort_by(|a, b| a.total_cmp(b));
            let q = |f: f64| g0[((g0.len() - 1) as f64 * f) as usize];
            eprintln!(
                "per-item max-gate quantiles: p10 {:.2} p25 {:.2} p50 {:.2} p75 {:.2} p90 {:.2}",
                q(0.1), q(0.25), q(0.5), q(0.75), q(0.9)
            );
        }
    }
    let metrics = evaluate(&outcome.model, &data.val)?;
    let mean_gate = metrics.mean_gate.expect("hier eval reports gates");
    let max_mean_gate = mean_gate.iter().cloned().fold(f64::MIN, f64::max);
    Ok(PolarizationReport {
        mean_gate,
        max_mean_gate,
        joint_total_mse: metrics.loss,
        per_expert_total_mse: metrics.per_expert_mse.expect("hier eval reports experts"),
        two_stage,
        constant_init,
    })
}

/// The default fixture.
pub fn run_polarization(two_stage: bool, constant_init: bool, seed: u64) -> Result<PolarizationReport> {
    run_polarization_with(&PolarizationFixture::default(), two_stage, constant_init, seed)
}
