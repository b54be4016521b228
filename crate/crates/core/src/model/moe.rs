//! The three low-level mixture-of-experts layers and the
//! coefficient-of-variation balancing regularizer.
//!
//! All mixtures are dense: every expert is evaluated and the softmax gate
//! weights the outputs (no top-k sparsification).

use super::batch::GraphBatch;
use super::harp::{gnn_layer, heads_forward};
use super::{GnnLayer, Mlp};
use crate::nn::{Tape, Var};
use std::rc::Rc;

/// Node MoE: `h_i' = sum_j softmax(W_G h_i)_j * GNN_j(h_i, Graph)` over all
/// nodes, replacing the post-pragma GNN layer. Returns the new states and
/// the per-node gate weights (`n_nodes x n`).
pub fn node_moe_layer(
    tape: &Tape,
    experts: &[GnnLayer<Var>],
    gate: Var,
    h: Var,
    batch: &GraphBatch,
) -> (Var, Var) {
    let n = experts.len();
    let gate_rows = tape.shape_of(gate)[0];
    assert_eq!(gate_rows, n, "gate has {gate_rows} rows for {n} experts");
    let logits = tape.matmul(h, tape.transpose(gate));
    let weights = tape.softmax_rows(logits);
    let mut out: Option<Var> = None;
    for (j, expert) in experts.iter().enumerate() {
        let expert_out = gnn_layer(tape, expert, h, batch);
        let weighted = tape.mul_col(expert_out, tape.slice_col(weights, j));
        out = Some(match out {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    (out.expect("at least one expert"), weights)
}

/// Block MoE: `h_i' = sum_j softmax(W_G h_i)_j * W_ej h_i` for pseudo nodes
/// only; other rows pass through unchanged (and are unused downstream in
/// the standard block variant). Returns the new states and the per-pseudo
/// gate weights.
pub fn block_moe_layer(
    tape: &Tape,
    experts: &[Var],
    gate: Var,
    h: Var,
    pseudo_rows: &Rc<Vec<usize>>,
) -> (Var, Var) {
    assert!(!pseudo_rows.is_empty(), "block MoE on a batch with no pseudo nodes");
    let n = experts.len();
    let gate_rows = tape.shape_of(gate)[0];
    assert_eq!(gate_rows, n, "gate has {gate_rows} rows for {n} experts");
    let hp = tape.gather_rows(h, pseudo_rows.clone());
    let logits = tape.matmul(hp, tape.transpose(gate));
    let weights = tape.softmax_rows(logits);
    let mut mixed: Option<Var> = None;
    for (j, expert) in experts.iter().enumerate() {
        let expert_out = tape.matmul(hp, tape.transpose(*expert));
        let weighted = tape.mul_col(expert_out, tape.slice_col(weights, j));
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    let out = tape.replace_rows(h, mixed.expect("at least one expert"), pseudo_rows.clone());
    (out, weights)
}

/// Graph MoE: `Y^(t) = sum_j softmax(W_G h_G)_j * MLP_j^(t)(h_G)` with one
/// shared gate across the five targets. Returns predictions and the
/// per-graph gate weights.
pub fn graph_moe_head(
    tape: &Tape,
    experts: &[Vec<Mlp<Var>>],
    gate: Var,
    graph_repr: Var,
) -> (Var, Var) {
    let n = experts.len();
    let gate_rows = tape.shape_of(gate)[0];
    assert_eq!(gate_rows, n, "gate has {gate_rows} rows for {n} experts");
    let logits = tape.matmul(graph_repr, tape.transpose(gate));
    let weights = tape.softmax_rows(logits);
    let mut out: Option<Var> = None;
    for (j, heads) in experts.iter().enumerate() {
        let pred = heads_forward(tape, heads, graph_repr);
        let weighted = tape.mul_col(pred, tape.slice_col(weights, j));
        out = Some(match out {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    (out.expect("at least one expert"), weights)
}

/// Coefficient-of-variation balancing term over a batch of gate weight
/// vectors: `I_j = sum_i w_ij`, `L_R = population_std(I) / mean(I)`.
/// Returns the scalar regularizer and the importance vector (`1 x n`).
pub fn cv_regularizer(tape: &Tape, weights: Var) -> (Var, Var) {
    let importance = tape.sum_rows(weights);
    let mean = tape.mean_all(importance);
    let centered = tape.sub_scalar_b(importance, mean);
    let variance = tape.mean_all(tape.mul(centered, centered));
    let std = tape.sqrt(variance);
    (tape.div(std, mean), importance)
}

/// Plain-tensor coefficient of variation (population std over mean), used
/// by diagnostics and tests.
pub fn cv_of(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}
