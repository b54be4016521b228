//! Forward pass of the five-component base model and its variants.
//!
//! The components: (1) a 6-layer GNN encoder with dropout between layers,
//! (2) one MLP per pragma kind transforming the pseudo nodes that kind
//! modifies, (3) a post-pragma GNN layer (replaced by the node MoE,
//! removed by the block MoE), (4) self-attention graph pooling over pseudo
//! and normal nodes, (5) per-target output MLP heads (mixed by the graph
//! MoE).

use super::batch::GraphBatch;
use super::moe;
use super::{AttnPool, GnnLayer, Mid, Mlp, ModelParams, Output, Variant};
use crate::nn::{Segments, Tape, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

/// Applies an MLP with the activation between layers (not after the last).
pub fn mlp_forward(tape: &Tape, mlp: &Mlp<Var>, x: Var, act: Activation) -> Var {
    let mut h = x;
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = tape.matmul(h, layer.w);
        if let Some(b) = layer.b {
            h = tape.add_bias(h, b);
        }
        if i + 1 < mlp.layers.len() {
            h = match act {
                Activation::Relu => tape.relu(h),
                Activation::Elu => tape.elu(h),
            };
        }
    }
    h
}

/// One message-passing layer: per-edge-class linear transforms of source
/// states, mean-aggregated into destinations, added to a self transform,
/// then ReLU. A graph with no edges reduces to `relu(self transform)`.
pub fn gnn_layer(tape: &Tape, layer: &GnnLayer<Var>, h: Var, batch: &GraphBatch) -> Var {
    let self_t = tape.matmul(h, layer.self_w);
    let mut agg: Option<Var> = None;
    for (c, idx) in batch.edges.iter().enumerate() {
        let Some(idx) = idx else { continue };
        let gathered = tape.gather_rows(h, idx.src.clone());
        let msgs = tape.matmul(gathered, layer.edge_w[c]);
        let scattered = tape.scatter_add_rows(msgs, idx.dst.clone(), batch.n_nodes);
        agg = Some(match agg {
            Some(a) => tape.add(a, scattered),
            None => scattered,
        });
    }
    let pre = match agg {
        Some(a) => {
            let mean = tape.scale_rows(a, batch.inv_deg.clone());
            tape.add(self_t, mean)
        }
        None => self_t,
    };
    tape.relu(pre)
}

/// The 6-layer encoder with dropout between layers (train mode only).
pub fn encode(
    tape: &Tape,
    params: &ModelParams<Var>,
    batch: &GraphBatch,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Var {
    let x = tape.constant(batch.features.clone());
    let mut h = x;
    let n_layers = params.trunk.encoder.len();
    for (l, layer) in params.trunk.encoder.iter().enumerate() {
        h = gnn_layer(tape, layer, h, batch);
        if train && l + 1 < n_layers {
            h = tape.dropout(h, params.cfg.dropout, true, rng);
        }
    }
    h
}

/// Replaces each pseudo node modified by a pragma of kind `k` with
/// `MLP_k(concat(state, value encoding))`. Kinds are applied in a fixed
/// order (parallel, pipeline, tiling); a pseudo node with several pragmas
/// is transformed once per kind. All other nodes pass through unchanged.
pub fn pragma_transform(tape: &Tape, params: &ModelParams<Var>, batch: &GraphBatch, h: Var) -> Var {
    let mut h = h;
    for group in &batch.pragma_groups {
        let mlp = &params.trunk.pragma_mlps[group.kind.index()];
        let states = tape.gather_rows(h, group.pseudo_rows.clone());
        let enc = tape.constant(group.enc.clone());
        let input = tape.concat_cols(&[states, enc]);
        let out = mlp_forward(tape, mlp, input, Activation::Relu);
        h = tape.replace_rows(h, out, group.pseudo_rows.clone());
    }
    h
}

/// Self-attention pooling over the rows of each segment:
/// `sum_i softmax(MLP(h_i)) * h_i` per graph.
pub fn attn_pool(tape: &Tape, pool: &AttnPool<Var>, h: Var, segments: &Segments) -> Var {
    let scores = mlp_forward(tape, &pool.score, h, Activation::Relu);
    let w = tape.segment_softmax(scores, segments.clone());
    tape.segment_weighted_sum(h, w, segments.clone())
}

/// Runs the per-target heads and concatenates their outputs columnwise.
pub fn heads_forward(tape: &Tape, heads: &[Mlp<Var>], repr: Var) -> Var {
    let outs: Vec<Var> = heads
        .iter()
        .map(|h| mlp_forward(tape, h, repr, Activation::Elu))
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Everything a forward pass exposes: predictions, the pooled graph
/// representation, and (for MoE variants) the low-level gate weights with
/// the item count `M` they were computed over.
pub struct ForwardOut {
    pub pred: Var,
    pub graph_repr: Var,
    pub low_gate: Option<Var>,
    pub gate_items: usize,
}

/// Full forward pass of a single-level model over a batch.
pub fn forward(
    tape: &Tape,
    params: &ModelParams<Var>,
    batch: &GraphBatch,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> ForwardOut {
    let mut h = encode(tape, params, batch, train, rng);
    h = pragma_transform(tape, params, batch, h);

    let mut low_gate = None;
    let mut gate_items = 0;
    match &params.mid {
        Mid::PostGnn(layer) => {
            h = gnn_layer(tape, layer, h, batch);
        }
        Mid::NodeMoe { experts, gate } => {
            let (out, w) = moe::node_moe_layer(tape, experts, *gate, h, batch);
            h = out;
            low_gate = Some(w);
            gate_items = batch.n_nodes;
        }
        Mid::BlockMoe { post_gnn, experts, gate } => {
            if let Some(layer) = post_gnn {
                h = gnn_layer(tape, layer, h, batch);
            }
            let (out, w) = moe::block_moe_layer(tape, experts, *gate, h, &batch.pseudo_rows);
            h = out;
            low_gate = Some(w);
            gate_items = batch.pseudo_rows.len();
        }
    }

    let pseudo_repr = attn_pool(tape, &params.pooling.pseudo, h, &batch.pseudo_segments);
    let graph_repr = match &params.pooling.normal {
        Some(np) => {
            let normal_repr = attn_pool(tape, np, h, &batch.normal_segments);
            tape.concat_cols(&[pseudo_repr, normal_repr])
        }
        None => pseudo_repr,
    };

    let pred = match &params.output {
        Output::Heads(heads) => heads_forward(tape, heads, graph_repr),
        Output::GraphMoe { experts, gate } => {
            let (pred, w) = moe::graph_moe_head(tape, experts, *gate, graph_repr);
            low_gate = Some(w);
            gate_items = batch.n_graphs;
            pred
        }
    };
    debug_assert!(
        params.cfg.variant == Variant::GraphMoe || matches!(params.output, Output::Heads(_)),
        "graph MoE output on a non-graph-MoE variant"
    );

    ForwardOut { pred, graph_repr, low_gate, gate_items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockVariant, EncodedGraph, ModelCfg, OutputKind};
    use crate::nn::Tensor;
    use crate::synthgen::{generate_suite, sample_dataset, Suite};
    use rand::SeedableRng;

    fn fixture() -> (Suite, Vec<EncodedGraph>) {
        let suite = generate_suite(13, 3, 1, false).unwrap();
        let mut encoded = Vec::new();
        for k in &suite.kernels {
            for s in sample_dataset(k, 3, 2).unwrap() {
                encoded.push(EncodedGraph::new(&k.graph, &s.design).unwrap());
            }
        }
        (suite, encoded)
    }

    fn tiny_cfg(f_in: usize, variant: Variant) -> ModelCfg {
        ModelCfg {
            hidden: 8,
            encoder_layers: 2,
            experts: 2,
            ..ModelCfg::new(f_in, variant)
        }
    }

    #[test]
    fn zero_params_give_zero_states() {
        let (_, encoded) = fixture();
        let batch = GraphBatch::new(&[&encoded[0]]);
        let cfg = tiny_cfg(encoded[0].f_in, Variant::Harp);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = crate::model::ModelParams::init(cfg, &mut rng);
        let mut leaves = Vec::new();
        params.leaves_mut(&mut leaves);
        for t in leaves {
            *t = Tensor::zeros(t.shape());
        }
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let h = encode(&tape, &vars, &batch, false, &mut rng);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism_per_variant() {
        let (_, encoded) = fixture();
        let refs: Vec<&EncodedGraph> = encoded.iter().take(4).collect();
        let batch = GraphBatch::new(&refs);
        for variant in [Variant::Harp, Variant::NodeMoe, Variant::BlockMoe, Variant::GraphMoe] {
            let cfg = tiny_cfg(encoded[0].f_in, variant);
            let params =
                crate::model::ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(42));
            let run = || {
                let tape = Tape::new();
                let vars = params.bind(&tape);
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let out = forward(&tape, &vars, &batch, true, &mut rng);
                tape.value(out.pred)
            };
            let a = run();
            let b = run();
            assert_eq!(a.shape(), &[4, 5], "{variant:?}");
            assert_eq!(a, b, "{variant:?} not deterministic");
            assert!(a.is_finite());
        }
    }

    #[test]
    fn classifier_head_has_two_logits() {
        let (_, encoded) = fixture();
        let batch = GraphBatch::new(&[&encoded[0], &encoded[1]]);
        let cfg = ModelCfg {
            outputs: OutputKind::Classification,
            ..tiny_cfg(encoded[0].f_in, Variant::Harp)
        };
        let params = crate::model::ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&tape, &vars, &batch, false, &mut rng);
        assert_eq!(tape.shape_of(out.pred), vec![2, 2]);
    }

    #[test]
    fn kernel_without_pragmas_passes_through_pragma_mlps() {
        // strip the pragma slots: pragma_transform must be the identity
        let suite = generate_suite(5, 2, 1, false).unwrap();
        let mut g = suite.kernels[0].graph.clone();
        g.pragma_slots.clear();
        let design = crate::cdfg::PragmaDesign::new(vec![]);
        let enc = EncodedGraph::new(&g, &design).unwrap();
        let batch = GraphBatch::new(&[&enc]);
        assert!(batch.pragma_groups.is_empty());

        let cfg = tiny_cfg(enc.f_in, Variant::Harp);
        let params = crate::model::ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = encode(&tape, &vars, &batch, false, &mut rng);
        let h2 = pragma_transform(&tape, &vars, &batch, h);
        assert_eq!(tape.value(h), tape.value(h2));
    }

    #[test]
    fn pooling_halves_are_independent() {
        // zeroing normal-node states only changes the normal half of the repr
        let (_, encoded) = fixture();
        let e = &encoded[0];
        let batch = GraphBatch::new(&[e]);
        let cfg = tiny_cfg(e.f_in, Variant::Harp);
        let params = crate::model::ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(9));

        let pooled = |zero_normals: bool| {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let mut h = Tensor::randn(&[batch.n_nodes, cfg.hidden], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            if zero_normals {
                for seg in batch.normal_segments.iter() {
                    for &r in seg {
                        for c in 0..cfg.hidden {
                            h.set2(r, c, 0.0);
                        }
                    }
                }
            }
            let hv = tape.leaf(h);
            let ps = attn_pool(&tape, &vars.pooling.pseudo, hv, &batch.pseudo_segments);
            let ns = attn_pool(&tape, vars.pooling.normal.as_ref().unwrap(), hv, &batch.normal_segments);
            (tape.value(ps), tape.value(ns))
        };
        let (p0, n0) = pooled(false);
        let (p1, n1) = pooled(true);
        assert_eq!(p0, p1, "pseudo half changed");
        assert_ne!(n0, n1, "normal half should change");
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = crate::model::AttnPool {
            score: crate::model::Mlp {
                layers: vec![
                    crate::model::Linear { w: tape.leaf(Tensor::randn(&[4, 4], 0.5, &mut rng)), b: Some(tape.leaf(Tensor::zeros(&[1, 4]))) },
                    crate::model::Linear { w: tape.leaf(Tensor::randn(&[4, 1], 0.5, &mut rng)), b: Some(tape.leaf(Tensor::zeros(&[1, 1]))) },
                ],
            },
        };
        let h = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.4, 1.0, 2.0]));
        let segs: Segments = std::rc::Rc::new(vec![vec![0]]);
        let scores = mlp_forward(&tape, &pool.score, h, Activation::Relu);
        let w = tape.segment_softmax(scores, segs.clone());
        assert_eq!(tape.value(w).data(), &[1.0]);
        let pooled = tape.segment_weighted_sum(h, w, segs);
        assert_eq!(tape.value(pooled).data(), tape.value(h).data());
    }

    #[test]
    fn duplicating_every_pooled_state_leaves_pool_unchanged() {
        // attention renormalizes: two copies of each state pool to the same vector
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let score = crate::model::Mlp {
            layers: vec![
                crate::model::Linear { w: tape.leaf(Tensor::randn(&[3, 3], 0.7, &mut rng)), b: Some(tape.leaf(Tensor::zeros(&[1, 3]))) },
                crate::model::Linear { w: tape.leaf(Tensor::randn(&[3, 1], 0.7, &mut rng)), b: Some(tape.leaf(Tensor::zeros(&[1, 1]))) },
            ],
        };
        let base = Tensor::matrix(4, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 1.0, 3.0, -2.0, 0.4]);
        let mut doubled_data = base.data().to_vec();
        doubled_data.extend_from_slice(base.data());
        let doubled = Tensor::matrix(8, 3, doubled_data);

        let pool_of = |h: Tensor, seg: Vec<usize>| {
            let hv = tape.leaf(h);
            let segs: Segments = std::rc::Rc::new(vec![seg]);
            let s = mlp_forward(&tape, &score, hv, Activation::Relu);
            let w = tape.segment_softmax(s, segs.clone());
            tape.value(tape.segment_weighted_sum(hv, w, segs))
        };
        let a = pool_of(base, vec![0, 1, 2, 3]);
        let b = pool_of(doubled, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn permutation_of_input_arrays_is_bit_invariant() {
        // canonical ordering fixes the summation order, so shuffling the
        // node/edge arrays changes nothing at the bit level
        let suite = generate_suite(21, 2, 1, false).unwrap();
        let k = &suite.kernels[2];
        let sample = &sample_dataset(k, 4, 6).unwrap()[1];

        let mut shuffled = k.graph.clone();
        shuffled.nodes.reverse();
        shuffled.nodes.rotate_left(5);
        shuffled.edges.reverse();

        let cfg = tiny_cfg(k.graph.layout.width(), Variant::NodeMoe);
        let params = crate::model::ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(10));
        let run = |g: &crate::cdfg::CdfGraph| {
            let enc = EncodedGraph::new(g, &sample.design).unwrap();
            let batch = GraphBatch::new(&[&enc]);
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward(&tape, &vars, &batch, false, &mut rng);
            (
                tape.value(out.pred).into_data(),
                tape.value(out.graph_repr).into_data(),
            )
        };
        let (pa, ra) = run(&k.graph);
        let (pb, rb) = run(&shuffled);
        assert_eq!(
            pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            ra.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            rb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn block_variants_change_structure() {
        let (_, encoded) = fixture();
        let e = &encoded[0];
        let batch = GraphBatch::new(&[e]);
        for (bv, dual) in [
            (BlockVariant::Standard, false),
            (BlockVariant::KeepPostGnn, false),
            (BlockVariant::KeepPostGnnDualPool, true),
        ] {
            let cfg = ModelCfg { block_variant: bv, ..tiny_cfg(e.f_in, Variant::BlockMoe) };
            assert_eq!(cfg.dual_pooling(), dual);
            let params = crate::model::ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3));
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward(&tape, &vars, &batch, false, &mut rng);
            let want = if dual { 2 * cfg.hidden } else { cfg.hidden };
            assert_eq!(tape.shape_of(out.graph_repr), vec![1, want], "{bv:?}");
            match bv {
                BlockVariant::Standard => assert!(matches!(vars.mid, Mid::BlockMoe { post_gnn: None, .. })),
                _ => assert!(matches!(vars.mid, Mid::BlockMoe { post_gnn: Some(_), .. })),
            }
        }
    }
}
