//! Graph encoding and block-diagonal batching for the models.
//!
//! An [`EncodedGraph`] is one kernel graph with one pragma design applied,
//! flattened into index structures the tape ops consume. Nodes are put in
//! canonical order (stable sort by block id, node kind, node id) so that
//! floating-point summation order, and therefore every forward pass, is
//! reproducible regardless of input array order.

use crate::cdfg::{
    edge_class, pragma_encoding, CdfGraph, NodeKind, PragmaDesign, PragmaKind, PragmaValue,
    EDGE_CLASSES, PRAGMA_CHANNELS,
};
use crate::error::Result;
use crate::nn::{Segments, Tensor};
use std::rc::Rc;

/// One pragma application: which pseudo-node row it modifies, with what
/// kind, encoded value, and the raw value (kept for gating diagnostics).
#[derive(Debug, Clone)]
pub struct PragmaApp {
    pub kind: PragmaKind,
    pub pseudo_row: usize,
    pub enc: [f64; PRAGMA_CHANNELS],
    pub value: PragmaValue,
}

/// A single design-applied graph in model-ready form.
#[derive(Debug, Clone)]
pub struct EncodedGraph {
    pub n: usize,
    pub f_in: usize,
    /// Row-major `n x f_in` node features in canonical order.
    pub features: Vec<f64>,
    /// Per directed edge class: (src_row, dst_row) pairs, sorted.
    pub edges: [Vec<(u32, u32)>; EDGE_CLASSES],
    /// Total incoming edges per node across all classes.
    pub in_deg: Vec<u32>,
    pub kind_of_row: Vec<NodeKind>,
    pub pseudo_rows: Vec<usize>,
    pub normal_rows: Vec<usize>,
    pub pragma_apps: Vec<PragmaApp>,
}

impl EncodedGraph {
    /// Encodes `base` with `design` applied. The base graph must already
    /// contain pseudo nodes.
    pub fn new(base: &CdfGraph, design: &PragmaDesign) -> Result<Self> {
        let graph = base.apply_pragma_design(design)?;
        let n = graph.n_nodes();
        let f_in = graph.layout.width();

        // canonical node order
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| {
            let nd = &graph.nodes[i];
            (nd.block_id, nd.kind.index(), nd.id)
        });
        let mut row_of_id = std::collections::BTreeMap::new();
        for (row, &i) in order.iter().enumerate() {
            row_of_id.insert(graph.nodes[i].id, row);
        }

        let mut features = vec![0.0; n * f_in];
        let mut kind_of_row = Vec::with_capacity(n);
        let mut pseudo_rows = Vec::new();
        let mut normal_rows = Vec::new();
        for (row, &i) in order.iter().enumerate() {
            let nd = &graph.nodes[i];
            features[row * f_in..(row + 1) * f_in].copy_from_slice(&nd.feature);
            kind_of_row.push(nd.kind);
            if nd.kind == NodeKind::Pseudo {
                pseudo_rows.push(row);
            } else {
                normal_rows.push(row);
            }
        }

        let mut edges: [Vec<(u32, u32)>; EDGE_CLASSES] = Default::default();
        let mut in_deg = vec![0u32; n];
        for e in &graph.edges {
            let src = row_of_id[&e.src] as u32;
            let dst = row_of_id[&e.dst] as u32;
            edges[edge_class(e.etype, e.reversed)].push((src, dst));
            in_deg[dst as usize] += 1;
        }
        for list in edges.iter_mut() {
            list.sort_unstable();
        }

        // pseudo-node pragma applications, grouped later by kind
        let mut pragma_apps = Vec::new();
        for (slot, value) in graph.pragma_slots.iter().zip(&design.values) {
            let pseudo_id = graph
                .pseudo_of_block(slot.target_block)
                .ok_or_else(|| crate::Error::data(format!("block {} has no pseudo node", slot.target_block)))?;
            pragma_apps.push(PragmaApp {
                kind: slot.kind,
                pseudo_row: row_of_id[&pseudo_id],
                enc: pragma_encoding(slot.kind, *value)?,
                value: *value,
            });
        }
        pragma_apps.sort_by_key(|a| (a.kind.index(), a.pseudo_row));

        Ok(EncodedGraph {
            n,
            f_in,
            features,
            edges,
            in_deg,
            kind_of_row,
            pseudo_rows,
            normal_rows,
            pragma_apps,
        })
    }
}

/// Edge gather/scatter indices for one directed edge class of a batch.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
}

/// Pragma applications of one kind across a batch.
#[derive(Debug, Clone)]
pub struct PragmaGroup {
    pub kind: PragmaKind,
    pub pseudo_rows: Rc<Vec<usize>>,
    /// `m x PRAGMA_CHANNELS` value encodings aligned with `pseudo_rows`.
    pub enc: Tensor,
    pub values: Vec<PragmaValue>,
}

/// A block-diagonal batch of encoded graphs.
pub struct GraphBatch {
    pub n_graphs: usize,
    pub n_nodes: usize,
    pub features: Tensor,
    pub edges: Vec<Option<EdgeIndex>>,
    /// 1/in_degree per node (0 where the node has no incoming edges).
    pub inv_deg: Rc<Vec<f64>>,
    pub pseudo_segments: Segments,
    pub normal_segments: Segments,
    pub all_segments: Segments,
    /// Flat pseudo rows across the batch (for the block MoE layer).
    pub pseudo_rows: Rc<Vec<usize>>,
    pub pragma_groups: Vec<PragmaGroup>,
    pub kind_of_row: Vec<NodeKind>,
    /// Graph index of each node row.
    pub graph_of_row: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&EncodedGraph]) -> Self {
        assert!(!graphs.is_empty(), "empty batch");
        let f_in = graphs[0].f_in;
        let n_nodes: usize = graphs.iter().map(|g| g.n).sum();

        let mut features = Vec::with_capacity(n_nodes * f_in);
        let mut edge_src: Vec<Vec<usize>> = vec![Vec::new(); EDGE_CLASSES];
        let mut edge_dst: Vec<Vec<usize>> = vec![Vec::new(); EDGE_CLASSES];
        let mut inv_deg = Vec::with_capacity(n_nodes);
        let mut pseudo_segments = Vec::with_capacity(graphs.len());
        let mut normal_segments = Vec::with_capacity(graphs.len());
        let mut all_segments = Vec::with_capacity(graphs.len());
        let mut pseudo_rows = Vec::new();
        let mut kind_of_row = Vec::with_capacity(n_nodes);
        let mut graph_of_row = Vec::with_capacity(n_nodes);
        let mut apps: Vec<(usize, PragmaApp)> = Vec::new();

        let mut offset = 0usize;
        for (gi, g) in graphs.iter().enumerate() {
            assert_eq!(g.f_in, f_in, "feature width mismatch in batch: {} vs {}", g.f_in, f_in);
            features.extend_from_slice(&g.features);
            for c in 0..EDGE_CLASSES {
                for &(s, d) in &g.edges[c] {
                    edge_src[c].push(offset + s as usize);
                    edge_dst[c].push(offset + d as usize);
                }
            }
            inv_deg.extend(g.in_deg.iter().map(|&d| if d > 0 { 1.0 / d as f64 } else { 0.0 }));
            pseudo_segments.push(g.pseudo_rows.iter().map(|&r| offset + r).collect::<Vec<_>>());
            normal_segments.push(g.normal_rows.iter().map(|&r| offset + r).collect::<Vec<_>>());
            all_segments.push((offset..offset + g.n).collect::<Vec<_>>());
            pseudo_rows.extend(g.pseudo_rows.iter().map(|&r| offset + r));
            kind_of_row.extend_from_slice(&g.kind_of_row);
            graph_of_row.extend(std::iter::repeat(gi).take(g.n));
            for a in &g.pragma_apps {
                let mut a = a.clone();
                a.pseudo_row += offset;
                apps.push((gi, a));
            }
            offset += g.n;
        }

        let edges = (0..EDGE_CLASSES)
            .map(|c| {
                if edge_src[c].is_empty() {
                    None
                } else {
                    Some(EdgeIndex {
                        src: Rc::new(std::mem::take(&mut edge_src[c])),
                        dst: Rc::new(std::mem::take(&mut edge_dst[c])),
                    })
                }
            })
            .collect();

        // group pragma applications by kind, keeping batch row order
        let mut pragma_groups = Vec::new();
        for kind in PragmaKind::ALL {
            let of_kind: Vec<&PragmaApp> = apps
                .iter()
                .filter(|(_, a)| a.kind == kind)
                .map(|(_, a)| a)
                .collect();
            if of_kind.is_empty() {
                continue;
            }
            let rows: Vec<usize> = of_kind.iter().map(|a| a.pseudo_row).collect();
            debug_assert!(
                rows.windows(2).all(|w| w[0] < w[1] || w[0] != w[1]),
                "duplicate pragma rows within one kind"
            );
            let mut enc = Vec::with_capacity(rows.len() * PRAGMA_CHANNELS);
            for a in &of_kind {
                enc.extend_from_slice(&a.enc);
            }
            pragma_groups.push(PragmaGroup {
                kind,
                pseudo_rows: Rc::new(rows),
                enc: Tensor::matrix(of_kind.len(), PRAGMA_CHANNELS, enc),
                values: of_kind.iter().map(|a| a.value).collect(),
            });
        }

        GraphBatch {
            n_graphs: graphs.len(),
            n_nodes,
            features: Tensor::matrix(n_nodes, f_in, features),
            edges,
            inv_deg: Rc::new(inv_deg),
            pseudo_segments: Rc::new(pseudo_segments),
            normal_segments: Rc::new(normal_segments),
            all_segments: Rc::new(all_segments),
            pseudo_rows: Rc::new(pseudo_rows),
            pragma_groups,
            kind_of_row,
            graph_of_row,
        }
    }

    /// Label matrix `(n_graphs x 5)` for regression targets.
    pub fn label_matrix(labels: &[crate::cdfg::Label]) -> Tensor {
        let mut data = Vec::with_capacity(labels.len() * crate::cdfg::N_TARGETS);
        for l in labels {
            data.extend_from_slice(&l.to_vec());
        }
        Tensor::matrix(labels.len(), crate::cdfg::N_TARGETS, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_suite, sample_dataset};

    #[test]
    fn encoding_is_canonical_under_permutation() {
        let suite = generate_suite(5, 2, 1, false).unwrap();
        let k = &suite.kernels[0];
        let sample = &sample_dataset(k, 5, 1).unwrap()[2];

        let enc_a = EncodedGraph::new(&k.graph, &sample.design).unwrap();

        // permute the node and edge arrays (ids untouched)
        let mut shuffled = k.graph.clone();
        let rot = 7 % shuffled.nodes.len().max(1);
        shuffled.nodes.rotate_left(rot);
        shuffled.nodes.reverse();
        shuffled.edges.rotate_left(3);
        let enc_b = EncodedGraph::new(&shuffled, &sample.design).unwrap();

        assert_eq!(enc_a.features, enc_b.features);
        assert_eq!(enc_a.edges, enc_b.edges);
        assert_eq!(enc_a.pseudo_rows, enc_b.pseudo_rows);
        assert_eq!(enc_a.in_deg, enc_b.in_deg);
    }

    #[test]
    fn batch_offsets_are_consistent() {
        let suite = generate_suite(5, 2, 1, false).unwrap();
        let k0 = &suite.kernels[0];
        let k1 = &suite.kernels[1];
        let d0 = &sample_dataset(k0, 3, 1).unwrap()[0];
        let d1 = &sample_dataset(k1, 3, 1).unwrap()[1];
        let e0 = EncodedGraph::new(&k0.graph, &d0.design).unwrap();
        let e1 = EncodedGraph::new(&k1.graph, &d1.design).unwrap();
        let batch = GraphBatch::new(&[&e0, &e1]);

        assert_eq!(batch.n_nodes, e0.n + e1.n);
        assert_eq!(batch.n_graphs, 2);
        // second graph's rows are offset by the first graph's size
        assert!(batch.pseudo_segments[1].iter().all(|&r| r >= e0.n));
        assert!(batch.all_segments[0].iter().all(|&r| r < e0.n));
        assert_eq!(batch.graph_of_row[e0.n], 1);
        // every pragma row is a pseudo node
        for g in &batch.pragma_groups {
            for &r in g.pseudo_rows.iter() {
                assert_eq!(batch.kind_of_row[r], NodeKind::Pseudo);
            }
        }
    }
}
