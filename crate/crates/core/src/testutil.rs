//! Test support: tiny graph fixtures and finite-difference gradient
//! oracles. Compiled only with the `testutil` feature; the oracles here
//! are independent of the tape's backward rules (they re-run the forward
//! pass at perturbed parameters).

use crate::cdfg::{
    Block, CdfGraph, Edge, EdgeType, FeatureLayout, Node, NodeKind, PipeMode, PragmaDesign,
    PragmaKind, PragmaSlot, PragmaValue,
};
use crate::model::harp::forward;
use crate::model::hier::hier_forward;
use crate::model::{EncodedGraph, GraphBatch, HierParams, ModelParams};
use crate::nn::{Tape, Tensor};
use crate::train::{single_loss, two_stage_loss, StageMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::rc::Rc;

/// Feature categories used by the tiny fixtures.
pub const TINY_CATEGORIES: usize = 6;

/// A hand-built kernel graph with at most 10 nodes: one loop header block
/// (phi, icmp, branch), a 2-node body, one parallel and one pipeline slot,
/// plus the two pseudo nodes.
pub fn tiny_graph(rng: &mut ChaCha8Rng) -> (CdfGraph, PragmaDesign) {
    let layout = FeatureLayout::new(TINY_CATEGORIES);
    let enc = |kind: NodeKind, cat: usize| layout.encode(kind, Some(cat % TINY_CATEGORIES));
    let nodes = vec![
        Node { id: 0, kind: NodeKind::Normal, block_id: 0, feature: enc(NodeKind::Normal, 0) },
        Node { id: 1, kind: NodeKind::Icmp, block_id: 0, feature: enc(NodeKind::Icmp, 1) },
        Node { id: 2, kind: NodeKind::Normal, block_id: 0, feature: enc(NodeKind::Normal, 2) },
        Node { id: 3, kind: NodeKind::Normal, block_id: 1, feature: enc(NodeKind::Normal, 3) },
        Node { id: 4, kind: NodeKind::Normal, block_id: 1, feature: enc(NodeKind::Normal, rng.gen_range(0..4)) },
        Node { id: 5, kind: NodeKind::Pragma, block_id: 0, feature: enc(NodeKind::Pragma, 4) },
        Node { id: 6, kind: NodeKind::Pragma, block_id: 0, feature: enc(NodeKind::Pragma, 5) },
    ];
    let mut edges = Vec::new();
    let mut link = |src: u32, dst: u32, etype: EdgeType| {
        edges.push(Edge { src, dst, etype, reversed: false });
        edges.push(Edge { src: dst, dst: src, etype, reversed: true });
    };
    link(0, 1, EdgeType::Data);
    link(1, 2, EdgeType::Control);
    link(2, 3, EdgeType::Control);
    link(3, 4, EdgeType::Data);
    link(4, 0, EdgeType::Control);
    link(5, 1, EdgeType::PragmaAttachment);
    link(6, 1, EdgeType::PragmaAttachment);

    let slots = vec![
        PragmaSlot {
            slot_id: "parallel.l0".into(),
            kind: PragmaKind::Parallel,
            legal_values: vec![PragmaValue::Int(1), PragmaValue::Int(2), PragmaValue::Int(4)],
            target_block: 0,
            pragma_node: 5,
        },
        PragmaSlot {
            slot_id: "pipeline.l0".into(),
            kind: PragmaKind::Pipeline,
            legal_values: PipeMode::ALL.iter().map(|&m| PragmaValue::Pipe(m)).collect(),
            target_block: 0,
            pragma_node: 6,
        },
    ];
    let raw = CdfGraph::new(
        layout,
        nodes,
        edges,
        vec![
            Block { id: 0, tag: "hdr".into() },
            Block { id: 1, tag: "body".into() },
        ],
        slots,
    );
    let graph = raw.insert_pseudo_nodes().expect("tiny graph inserts pseudo nodes");
    assert!(graph.n_nodes() <= 10);
    let design = PragmaDesign::new(vec![
        [PragmaValue::Int(1), PragmaValue::Int(2), PragmaValue::Int(4)][rng.gen_range(0..3)],
        PragmaValue::Pipe(PipeMode::ALL[rng.gen_range(0..3)]),
    ]);
    (graph, design)
}

/// A batch of tiny graphs with random targets and classes.
pub fn tiny_batch(seed: u64, n_graphs: usize) -> (Vec<EncodedGraph>, Tensor, Rc<Vec<usize>>) {
    let mut rng = crate::seed::rng(seed, "tiny-batch");
    let mut graphs = Vec::with_capacity(n_graphs);
    let mut labels = Vec::with_capacity(n_graphs * 5);
    let mut classes = Vec::with_capacity(n_graphs);
    for _ in 0..n_graphs {
        let (g, d) = tiny_graph(&mut rng);
        graphs.push(EncodedGraph::new(&g, &d).expect("tiny graph encodes"));
        labels.push(rng.gen_range(-1.0..2.0));
        for _ in 0..4 {
            labels.push(rng.gen_range(0.0..1.0));
        }
        classes.push(rng.gen_range(0..2usize));
    }
    (graphs, Tensor::matrix(n_graphs, 5, labels), Rc::new(classes))
}

/// Gradient-check summary.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so finite-difference noise on near-zero
/// gradients does not dominate.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Central finite differences over sampled coordinates of every leaf, with
/// evaluation through arbitrary get/set accessors.
fn run_fd(
    analytic: &[Tensor],
    get: &dyn Fn(usize, usize) -> f64,
    set: &dyn Fn(usize, usize, f64),
    eval: &dyn Fn() -> f64,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for &i in &picks {
            let orig = get(ti, i);
            set(ti, i, orig + FD_STEP);
            let up = eval();
            set(ti, i, orig - FD_STEP);
            let down = eval();
            set(ti, i, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(grad.data()[i], numeric));
            checked += 1;
        }
    }
    GradCheck { checked, max_rel_err: max_rel }
}

/// Finite-difference check of a single-level model's full loss gradient
/// (eval-mode forward, so the loss is deterministic under perturbation).
pub fn grad_check_single(
    params: &ModelParams<Tensor>,
    graphs: &[EncodedGraph],
    labels: &Tensor,
    classes: &Rc<Vec<usize>>,
    alpha: f64,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let refs: Vec<&EncodedGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs);
    let outputs = params.cfg.outputs;

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&tape, &vars, &batch, false, &mut r);
        let loss = single_loss(&tape, &out, labels, classes, outputs, alpha);
        tape.backward(loss);
        vars.grads(&tape)
    };

    let perturbed = RefCell::new(params.clone());
    run_fd(
        &analytic,
        &|ti, i| {
            let mut p = perturbed.borrow_mut();
            let mut leaves = Vec::new();
            p.leaves_mut(&mut leaves);
            leaves[ti].data()[i]
        },
        &|ti, i, v| {
            let mut p = perturbed.borrow_mut();
            let mut leaves = Vec::new();
            p.leaves_mut(&mut leaves);
            leaves[ti].data_mut()[i] = v;
        },
        &|| {
            let p = perturbed.borrow();
            let tape = Tape::new();
            let vars = p.bind(&tape);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = forward(&tape, &vars, &batch, false, &mut r);
            tape.item(single_loss(&tape, &out, labels, classes, outputs, alpha))
        },
        samples_per_tensor,
        rng,
    )
}

/// Finite-difference check of the hierarchical model under either stage
/// mode of the two-stage loss.
pub fn grad_check_hier(
    params: &HierParams<Tensor>,
    graphs: &[EncodedGraph],
    labels: &Tensor,
    mode: StageMode,
    alpha: f64,
    beta: f64,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let refs: Vec<&EncodedGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs);

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = hier_forward(&tape, &vars, &batch, false, &mut r).expect("finite forward");
        let loss = two_stage_loss(&tape, &out, labels, mode, alpha, beta);
        tape.backward(loss);
        vars.grads(&tape)
    };

    let perturbed = RefCell::new(params.clone());
    run_fd(
        &analytic,
        &|ti, i| {
            let mut p = perturbed.borrow_mut();
            let mut leaves = Vec::new();
            p.leaves_mut(&mut leaves);
            leaves[ti].data()[i]
        },
        &|ti, i, v| {
            let mut p = perturbed.borrow_mut();
            let mut leaves = Vec::new();
            p.leaves_mut(&mut leaves);
            leaves[ti].data_mut()[i] = v;
        },
        &|| {
            let p = perturbed.borrow();
            let tape = Tape::new();
            let vars = p.bind(&tape);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = hier_forward(&tape, &vars, &batch, false, &mut r).expect("finite forward");
            tape.item(two_stage_loss(&tape, &out, labels, mode, alpha, beta))
        },
        samples_per_tensor,
        rng,
    )
}
