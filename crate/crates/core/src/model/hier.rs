//! The high-level mixture: three complete low-level models whose
//! five-target predictions are mixed by a learned 3-way gate.

use super::batch::GraphBatch;
use super::harp::{forward, mlp_forward, Activation, ForwardOut};
use super::{GateDesign, HierParams, HighGate};
use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Hierarchical forward output: the mixed prediction, the gate weights
/// (`n_graphs x 3`), and each expert's full forward output for diagnostics
/// and two-stage training.
pub struct HierOut {
    pub pred: Var,
    pub gate: Var,
    pub experts: Vec<ForwardOut>,
}

/// Computes the 3-way gate weights. `InputPooling` attends over raw node
/// features; `HiddenConcat` consumes the concatenated expert graph
/// representations. With the constant (all-zero) head initialization the
/// output is exactly uniform for every input.
pub fn high_gate(
    tape: &Tape,
    gate: &HighGate<Var>,
    design: GateDesign,
    batch: &GraphBatch,
    expert_reprs: &[Var],
) -> Result<Var> {
    let input = match design {
        GateDesign::HiddenConcat => {
            if expert_reprs.is_empty() {
                return Err(Error::data(
                    "hidden-concat gate requested without expert representations",
                ));
            }
            tape.concat_cols(expert_reprs)
        }
        GateDesign::InputPooling => {
            let attn = gate
                .input_attn
                .as_ref()
                .ok_or_else(|| Error::data("input-pooling gate has no attention MLP"))?;
            let x = tape.constant(batch.features.clone());
            let scores = mlp_forward(tape, attn, x, Activation::Relu);
            let w = tape.segment_softmax(scores, batch.all_segments.clone());
            tape.segment_weighted_sum(x, w, batch.all_segments.clone())
        }
    };
    let mut logits = tape.matmul(input, gate.head.w);
    if let Some(b) = gate.head.b {
        logits = tape.add_bias(logits, b);
    }
    Ok(tape.softmax_rows(logits))
}

/// Full hierarchical forward pass: `Y = sum_i g_i * Y_i`. A NaN in any
/// expert's output aborts with that expert's identity.
pub fn hier_forward(
    tape: &Tape,
    params: &HierParams<Var>,
    batch: &GraphBatch,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<HierOut> {
    let variants = params.cfg.experts_mix.variants();
    let experts: Vec<ForwardOut> = params
        .experts
        .iter()
        .map(|e| forward(tape, e, batch, train, rng))
        .collect();
    for (i, out) in experts.iter().enumerate() {
        if !tape.value(out.pred).is_finite() {
            return Err(Error::Numerical(format!(
                "expert {} ({}) produced a non-finite prediction",
                i,
                variants[i].name()
            )));
        }
    }
    let reprs: Vec<Var> = experts.iter().map(|e| e.graph_repr).collect();
    let gate = high_gate(tape, &params.gate, params.cfg.gate_design, batch, &reprs)?;

    let mut pred: Option<Var> = None;
    for (i, out) in experts.iter().enumerate() {
        let weighted = tape.mul_col(out.pred, tape.slice_col(gate, i));
        pred = Some(match pred {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    Ok(HierOut {
        pred: pred.expect("three experts"),
        gate,
        experts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncodedGraph, HierCfg, HierExperts, ModelCfg, Variant};
    use crate::nn::Tensor;
    use crate::synthgen::{generate_suite, sample_dataset};
    use rand::SeedableRng;

    fn tiny_hier_cfg(f_in: usize, design: GateDesign) -> HierCfg {
        HierCfg {
            base: ModelCfg { hidden: 8, encoder_layers: 2, experts: 2, ..ModelCfg::new(f_in, Variant::NodeMoe) },
            gate_design: design,
            experts_mix: HierExperts::Mixed,
            constant_gate_init: true,
        }
    }

    fn fixture_batch() -> (Vec<EncodedGraph>, usize) {
        let suite = generate_suite(23, 2, 1, false).unwrap();
        let mut encoded = Vec::new();
        for k in &suite.kernels {
            for s in sample_dataset(k, 2, 4).unwrap() {
                encoded.push(EncodedGraph::new(&k.graph, &s.design).unwrap());
            }
        }
        let f_in = encoded[0].f_in;
        (encoded, f_in)
    }

    #[test]
    fn constant_init_gate_is_exactly_uniform() {
        let (encoded, f_in) = fixture_batch();
        let refs: Vec<&EncodedGraph> = encoded.iter().collect();
        let batch = GraphBatch::new(&refs);
        for design in [GateDesign::HiddenConcat, GateDesign::InputPooling] {
            let params = crate::model::HierParams::init(
                tiny_hier_cfg(f_in, design),
                &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
            );
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let out = hier_forward(&tape, &vars, &batch, false, &mut rng).unwrap();
            let g = tape.value(out.gate);
            for r in 0..g.rows() {
                let row: Vec<f64> = (0..3).map(|c| g.at2(r, c)).collect();
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let min = row.iter().cloned().fold(f64::MAX, f64::min);
                assert_eq!(max.to_bits(), min.to_bits(), "{design:?} row {r} not bit-uniform");
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            // uniform gate means the prediction is the arithmetic mean of experts
            let pred = tape.value(out.pred);
            let e: Vec<Tensor> = out.experts.iter().map(|x| tape.value(x.pred)).collect();
            for r in 0..pred.rows() {
                for c in 0..pred.cols() {
                    let mean = (e[0].at2(r, c) + e[1].at2(r, c) + e[2].at2(r, c)) / 3.0;
                    assert!((pred.at2(r, c) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forced_vertex_gate_selects_one_expert() {
        let (encoded, f_in) = fixture_batch();
        let batch = GraphBatch::new(&[&encoded[0], &encoded[1]]);
        let mut params = crate::model::HierParams::init(
            tiny_hier_cfg(f_in, GateDesign::HiddenConcat),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(2),
        );
        // huge bias on expert 0 forces g ~ [1, 0, 0]
        params.gate.head.b = Some(Tensor::row(&[500.0, 0.0, 0.0]));
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = hier_forward(&tape, &vars, &batch, false, &mut rng).unwrap();
        let pred = tape.value(out.pred);
        let first = tape.value(out.experts[0].pred);
        for (a, b) in pred.data().iter().zip(first.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_stays_between_expert_extremes() {
        let (encoded, f_in) = fixture_batch();
        let refs: Vec<&EncodedGraph> = encoded.iter().collect();
        let batch = GraphBatch::new(&refs);
        let mut cfg = tiny_hier_cfg(f_in, GateDesign::HiddenConcat);
        cfg.constant_gate_init = false;
        let params = crate::model::HierParams::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(20));
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = hier_forward(&tape, &vars, &batch, false, &mut rng).unwrap();
        let pred = tape.value(out.pred);
        let e: Vec<Tensor> = out.experts.iter().map(|x| tape.value(x.pred)).collect();
        for r in 0..pred.rows() {
            for c in 0..pred.cols() {
                let vals: Vec<f64> = e.iter().map(|t| t.at2(r, c)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = pred.at2(r, c);
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "({r},{c}): {v} outside [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn single_granularity_ablation_builds_three_copies() {
        let (_, f_in) = fixture_batch();
        for mix in [HierExperts::Node, HierExperts::Block, HierExperts::Graph] {
            let mut cfg = tiny_hier_cfg(f_in, GateDesign::HiddenConcat);
            cfg.experts_mix = mix;
            let params = crate::model::HierParams::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
            let variants: Vec<Variant> = params.experts.iter().map(|e| e.cfg.variant).collect();
            assert_eq!(variants[0], variants[1]);
            assert_eq!(variants[1], variants[2]);
        }
    }
}
