//! Expert-assignment diagnostics.
//!
//! Produces the gating report: per-expert mean weights sliced by node kind
//! (node MoE) and by pragma status (block MoE), per-kernel mean high-level
//! weights, and the nearest source kernel per target under cosine
//! similarity of graph-MoE expert weights.

use crate::cdfg::{NodeKind, PipeMode, PragmaKind, PragmaValue};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::harp::forward;
use crate::model::hier::hier_forward;
use crate::model::{GraphBatch, Variant};
use crate::synthgen::Split;
use crate::train::{target_items, AnyModel, TrainItem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Pragma-status columns of the block-MoE table.
pub const BLOCK_COLUMNS: [&str; 5] =
    ["no_pragma", "tiling", "pipeline", "parallel_le4", "parallel_gt4"];

/// Node-kind columns of the node-MoE table (`normal` excludes icmp nodes,
/// which get their own column).
pub const NODE_COLUMNS: [&str; 4] = ["normal", "icmp", "pragma", "pseudo"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightTable {
    pub columns: Vec<String>,
    /// `rows[expert][column]` = mean assigned weight.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelGate {
    pub kernel_id: String,
    pub split: Split,
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub target_kernel: String,
    pub nearest_source: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GatingReport {
    /// Per-kernel mean 3-way weights of the high-level gate.
    pub high_level: Option<Vec<KernelGate>>,
    pub node_moe: Option<WeightTable>,
    pub block_moe: Option<WeightTable>,
    /// Per-kernel mean graph-MoE expert weights.
    pub graph_moe: Option<Vec<KernelGate>>,
    /// Nearest source kernel per target by cosine similarity over the
    /// graph-MoE weights.
    pub similarity: Option<Vec<SimilarityRow>>,
}

#[derive(Default)]
struct SliceAcc {
    /// [expert][column] -> (weight sum, count)
    sums: Vec<Vec<f64>>,
    counts: Vec<f64>,
}

impl SliceAcc {
    fn ensure(&mut self, experts: usize, columns: usize) {
        if self.sums.is_empty() {
            self.sums = vec![vec![0.0; columns]; experts];
            self.counts = vec![0.0; columns];
        }
    }

    fn table(&self, columns: &[&str]) -> WeightTable {
        WeightTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: self
                .sums
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&self.counts)
                        .map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Pragma-status flags per pseudo row of a batch, aligned with
/// `batch.pseudo_rows` and the [`BLOCK_COLUMNS`] order.
fn pragma_status(batch: &GraphBatch) -> Vec<[bool; 5]> {
    let index_of: BTreeMap<usize, usize> = batch
        .pseudo_rows
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, i))
        .collect();
    let mut status = vec![[false; 5]; batch.pseudo_rows.len()];
    let mut touched = vec![false; batch.pseudo_rows.len()];
    for group in &batch.pragma_groups {
        for (&row, value) in group.pseudo_rows.iter().zip(&group.values) {
            let i = index_of[&row];
            touched[i] = true;
            match (group.kind, value) {
                (PragmaKind::Tiling, _) => status[i][1] = true,
                (PragmaKind::Pipeline, PragmaValue::Pipe(m)) => {
                    if *m != PipeMode::Off {
                        status[i][2] = true;
                    }
                }
                (PragmaKind::Parallel, PragmaValue::Int(v)) => {
                    if *v <= 4 {
                        status[i][3] = true;
                    } else {
                        status[i][4] = true;
                    }
                }
                _ => {}
            }
        }
    }
    for (i, t) in touched.iter().enumerate() {
        if !t {
            status[i][0] = true;
        }
    }
    status
}

fn node_column(kind: NodeKind) -> usize {
    match kind {
        NodeKind::Normal => 0,
        NodeKind::Icmp => 1,
        NodeKind::Pragma => 2,
        NodeKind::Pseudo => 3,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct Collector {
    node: SliceAcc,
    block: SliceAcc,
    /// kernel -> (graph-MoE weight sums, count)
    graph: BTreeMap<String, (Vec<f64>, f64)>,
    high: BTreeMap<String, (Vec<f64>, f64)>,
    saw_node: bool,
    saw_block: bool,
}

impl Collector {
    fn new() -> Self {
        Collector {
            node: SliceAcc::default(),
            block: SliceAcc::default(),
            graph: BTreeMap::new(),
            high: BTreeMap::new(),
            saw_node: false,
            saw_block: false,
        }
    }

    fn collect_low(
        &mut self,
        variant: Variant,
        weights: &crate::nn::Tensor,
        batch: &GraphBatch,
        kernel_id: &str,
    ) {
        let n = weights.cols();
        match variant {
            Variant::NodeMoe => {
                self.saw_node = true;
                self.node.ensure(n, NODE_COLUMNS.len());
                for (row, &kind) in batch.kind_of_row.iter().enumerate() {
                    let col = node_column(kind);
                    self.node.counts[col] += 1.0;
                    for j in 0..n {
                        self.node.sums[j][col] += weights.at2(row, j);
                    }
                }
            }
            Variant::BlockMoe => {
                self.saw_block = true;
                self.block.ensure(n, BLOCK_COLUMNS.len());
                let status = pragma_status(batch);
                for (i, flags) in status.iter().enumerate() {
                    for (col, &on) in flags.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        self.block.counts[col] += 1.0;
                        for j in 0..n {
                            self.block.sums[j][col] += weights.at2(i, j);
                        }
                    }
                }
            }
            Variant::GraphMoe => {
                let entry = self
                    .graph
                    .entry(kernel_id.to_string())
                    .or_insert_with(|| (vec![0.0; n], 0.0));
                for r in 0..weights.rows() {
                    for j in 0..n {
                        entry.0[j] += weights.at2(r, j);
                    }
                    entry.1 += 1.0;
                }
            }
            Variant::Harp => {}
        }
    }
}

/// Computes the gating report for a model over every kernel's regression
/// samples (capped per kernel for cost).
pub fn analyze(model: &AnyModel, ds: &Dataset, per_kernel_cap: usize) -> Result<GatingReport> {
    let mut collector = Collector::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for kernel in &ds.suite.kernels {
        let mut items: Vec<TrainItem> = target_items(ds, &kernel.id, false)?;
        items.truncate(per_kernel_cap);
        if items.is_empty() {
            continue;
        }
        for chunk in items.chunks(64) {
            let graphs: Vec<&crate::model::EncodedGraph> =
                chunk.iter().map(|it| it.graph.as_ref()).collect();
            let batch = GraphBatch::new(&graphs);
            let tape = crate::nn::Tape::new();
            match model {
                AnyModel::Single(p) => {
                    let vars = p.bind(&tape);
                    let out = forward(&tape, &vars, &batch, false, &mut rng);
                    if let Some(w) = out.low_gate {
                        collector.collect_low(p.cfg.variant, &tape.value(w), &batch, &kernel.id);
                    }
                }
                AnyModel::Hier(p) => {
                    let vars = p.bind(&tape);
                    let out = hier_forward(&tape, &vars, &batch, false, &mut rng)?;
                    let variants = p.cfg.experts_mix.variants();
                    for (i, e) in out.experts.iter().enumerate() {
                        if let Some(w) = e.low_gate {
                            collector.collect_low(variants[i], &tape.value(w), &batch, &kernel.id);
                        }
                    }
                    let g = tape.value(out.gate);
                    let entry = collector
                        .high
                        .entry(kernel.id.clone())
                        .or_insert_with(|| (vec![0.0; 3], 0.0));
                    for r in 0..g.rows() {
                        for c in 0..3 {
                            entry.0[c] += g.at2(r, c);
                        }
                        entry.1 += 1.0;
                    }
                }
            }
        }
    }

    let split_of = |id: &str| ds.suite.kernel(id).map(|k| k.split).unwrap_or(Split::Source);
    let kernel_gates = |map: &BTreeMap<String, (Vec<f64>, f64)>| -> Vec<KernelGate> {
        ds.suite
            .kernels
            .iter()
            .filter_map(|k| {
                map.get(&k.id).map(|(sum, n)| KernelGate {
                    kernel_id: k.id.clone(),
                    split: k.split,
                    mean_weights: sum.iter().map(|s| s / n).collect(),
                })
            })
            .collect()
    };

    let graph_gates = kernel_gates(&collector.graph);
    let similarity = if graph_gates.iter().any(|g| split_of(&g.kernel_id) == Split::Target) {
        let sources: Vec<&KernelGate> = graph_gates
            .iter()
            .filter(|g| g.split == Split::Source)
            .collect();
        let rows: Vec<SimilarityRow> = graph_gates
            .iter()
            .filter(|g| g.split == Split::Target)
            .filter_map(|t| {
                sources
                    .iter()
                    .map(|s| (s, cosine(&t.mean_weights, &s.mean_weights)))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(s, c)| SimilarityRow {
                        target_kernel: t.kernel_id.clone(),
                        nearest_source: s.kernel_id.clone(),
                        cosine: c,
                    })
            })
            .collect();
        (!rows.is_empty()).then_some(rows)
    } else {
        None
    };

    Ok(GatingReport {
        high_level: (!collector.high.is_empty()).then(|| kernel_gates(&collector.high)),
        node_moe: collector.saw_node.then(|| collector.node.table(&NODE_COLUMNS)),
        block_moe: collector.saw_block.then(|| collector.block.table(&BLOCK_COLUMNS)),
        graph_moe: (!collector.graph.is_empty()).then_some(graph_gates),
        similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, GenScale};
    use crate::model::{HierCfg, HierParams, ModelCfg, ModelParams};
    use crate::seed;

    fn tiny_ds() -> Dataset {
        build_dataset(17, 2, 1, false, &GenScale { regre_source: 20, regre_target: 15, class_ratio: 1.5 }).unwrap()
    }

    #[test]
    fn untrained_constant_init_reports_uniform_high_gate() {
        let ds = tiny_ds();
        let f_in = ds.suite.kernels[0].graph.layout.width();
        let cfg = HierCfg {
            base: ModelCfg { hidden: 8, encoder_layers: 2, experts: 2, ..ModelCfg::new(f_in, Variant::NodeMoe) },
            ..HierCfg::new(f_in)
        };
        let model = AnyModel::Hier(HierParams::init(cfg, &mut seed::rng(0, "init")));
        let report = analyze(&model, &ds, 10).unwrap();
        let high = report.high_level.expect("hier model reports high gate");
        assert_eq!(high.len(), ds.suite.kernels.len());
        for kg in &high {
            for w in &kg.mean_weights {
                assert!((w - 1.0 / 3.0).abs() < 1e-12, "weight {w} not uniform");
            }
        }
        // mixed hierarchy populates every section
        assert!(report.node_moe.is_some());
        assert!(report.block_moe.is_some());
        assert!(report.graph_moe.is_some());
        assert!(report.similarity.is_some());
        let sim = report.similarity.unwrap();
        assert_eq!(sim.len(), 1);
        assert!(sim[0].cosine <= 1.0 + 1e-12);
    }

    #[test]
    fn single_variants_fill_only_their_section() {
        let ds = tiny_ds();
        let f_in = ds.suite.kernels[0].graph.layout.width();
        let mk = |variant| {
            let cfg = ModelCfg { hidden: 8, encoder_layers: 2, experts: 2, ..ModelCfg::new(f_in, variant) };
            AnyModel::Single(ModelParams::init(cfg, &mut seed::rng(1, "init")))
        };
        let node = analyze(&mk(Variant::NodeMoe), &ds, 8).unwrap();
        assert!(node.node_moe.is_some() && node.block_moe.is_none() && node.graph_moe.is_none());
        let table = node.node_moe.unwrap();
        assert_eq!(table.columns, NODE_COLUMNS);
        assert_eq!(table.rows.len(), 2);
        // each column's expert weights sum to ~1 (means of simplex rows)
        for col in 0..table.columns.len() {
            let s: f64 = table.rows.iter().map(|r| r[col]).sum();
            assert!((s - 1.0).abs() < 1e-6, "column {col} sums to {s}");
        }

        let block = analyze(&mk(Variant::BlockMoe), &ds, 8).unwrap();
        assert!(block.block_moe.is_some() && block.node_moe.is_none());
        let harp = analyze(&mk(Variant::Harp), &ds, 8).unwrap();
        assert!(harp.node_moe.is_none() && harp.block_moe.is_none() && harp.graph_moe.is_none());
    }
}
