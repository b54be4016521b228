//! Finite-difference gradient checks for every model structure: the plain
//! base model, each single MoE variant (including block structural
//! variants and the classifier head), and the hierarchical model under
//! both stage modes and both gate designs.

use hiermoe_core::model::{
    BlockVariant, GateDesign, HierCfg, HierExperts, HierParams, ModelCfg, ModelParams, OutputKind,
    Variant,
};
use hiermoe_core::seed;
use hiermoe_core::testutil::{grad_check_hier, grad_check_single, tiny_batch, TINY_CATEGORIES};
use hiermoe_core::train::StageMode;

const TOL: f64 = 1e-4;
const SAMPLES_PER_TENSOR: usize = 4;

fn f_in() -> usize {
    4 + TINY_CATEGORIES + 5
}

fn tiny_cfg(variant: Variant) -> ModelCfg {
    ModelCfg {
        hidden: 8,
        encoder_layers: 2,
        experts: 2,
        ..ModelCfg::new(f_in(), variant)
    }
}

#[test]
fn single_variants_match_finite_differences() {
    let mut worst = 0.0f64;
    let mut instances = 0;
    for (i, variant) in [Variant::Harp, Variant::NodeMoe, Variant::BlockMoe, Variant::GraphMoe]
        .into_iter()
        .enumerate()
    {
        for rep in 0..3u64 {
            let fixture_seed = 100 + 10 * i as u64 + rep;
            let (graphs, labels, classes) = tiny_batch(fixture_seed, 3);
            let params = ModelParams::init(tiny_cfg(variant), &mut seed::rng(fixture_seed, "gc-init"));
            let mut rng = seed::rng(fixture_seed, "gc-pick");
            let check = grad_check_single(
                &params, &graphs, &labels, &classes, 5e-3, SAMPLES_PER_TENSOR, &mut rng,
            );
            assert!(
                check.max_rel_err < TOL,
                "{variant:?} rep {rep}: max rel err {}",
                check.max_rel_err
            );
            instances += 1;
            worst = worst.max(check.max_rel_err);
        }
    }
    println!("single-model gradcheck: {instances} instances, worst rel err {worst:.2e}");
}

#[test]
fn block_structural_variants_match_finite_differences() {
    for bv in [BlockVariant::KeepPostGnn, BlockVariant::KeepPostGnnDualPool] {
        let (graphs, labels, classes) = tiny_batch(7, 3);
        let cfg = ModelCfg { block_variant: bv, ..tiny_cfg(Variant::BlockMoe) };
        let params = ModelParams::init(cfg, &mut seed::rng(8, "gc-init"));
        let mut rng = seed::rng(9, "gc-pick");
        let check =
            grad_check_single(&params, &graphs, &labels, &classes, 5e-3, SAMPLES_PER_TENSOR, &mut rng);
        assert!(check.max_rel_err < TOL, "{bv:?}: {}", check.max_rel_err);
    }
}

#[test]
fn classifier_head_matches_finite_differences() {
    let (graphs, labels, classes) = tiny_batch(21, 4);
    let cfg = ModelCfg { outputs: OutputKind::Classification, ..tiny_cfg(Variant::Harp) };
    let params = ModelParams::init(cfg, &mut seed::rng(22, "gc-init"));
    let mut rng = seed::rng(23, "gc-pick");
    let check =
        grad_check_single(&params, &graphs, &labels, &classes, 0.0, SAMPLES_PER_TENSOR, &mut rng);
    assert!(check.max_rel_err < TOL, "classifier: {}", check.max_rel_err);
}

#[test]
fn hier_model_matches_finite_differences_in_both_modes() {
    for (i, mode) in [StageMode::Separate, StageMode::Joint].into_iter().enumerate() {
        for (j, design) in [GateDesign::HiddenConcat, GateDesign::InputPooling].into_iter().enumerate() {
            let fixture_seed = 300 + 20 * i as u64 + j as u64;
            let (graphs, labels, _) = tiny_batch(fixture_seed, 3);
            let cfg = HierCfg {
                base: tiny_cfg(Variant::NodeMoe),
                gate_design: design,
                experts_mix: HierExperts::Mixed,
                // random gate init so the gate path carries real gradients
                constant_gate_init: false,
            };
            let params = HierParams::init(cfg, &mut seed::rng(fixture_seed, "gc-init"));
            let mut rng = seed::rng(fixture_seed, "gc-pick");
            let check = grad_check_hier(
                &params, &graphs, &labels, mode, 5e-3, 5e-3, SAMPLES_PER_TENSOR, &mut rng,
            );
            assert!(
                check.max_rel_err < TOL,
                "{mode:?}/{design:?}: max rel err {}",
                check.max_rel_err
            );
        }
    }
}
