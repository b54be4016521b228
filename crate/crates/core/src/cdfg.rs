//! Control-data-flow graph data model.
//!
//! Kernels are represented as typed graphs in the ProGraML style: normal
//! nodes are instructions/values, one pseudo node per basic block is
//! connected to every member of that block, and pragma nodes carry the
//! tunable annotation values. Pragma slots describe the legal value sets;
//! a [`PragmaDesign`] picks one value per slot.
//!
//! Node features use a fixed-width layout:
//! `[node-kind one-hot (4) | opcode/category one-hot (C) | pragma channels (5)]`.
//! The five pragma channels are
//! `[parallel log2(value), tiling log2(value), pipe off, pipe flatten, pipe coarse]`.
//! Icmp (loop condition) nodes reuse channel 0 for `log2(trip count)` so the
//! loop extent is visible to the models; all other non-pragma nodes keep the
//! channels at zero.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

/// Schema version stamped into every serialized graph/sample record.
pub const SCHEMA_VERSION: u32 = 1;

/// Reference latency (cycles) used by the performance normalization.
pub const LATENCY_REF: f64 = 1e7;

/// Number of node-kind channels in the feature layout.
pub const KIND_CHANNELS: usize = 4;
/// Number of pragma channels in the feature layout.
pub const PRAGMA_CHANNELS: usize = 5;

/// The four FPGA resource types whose utilization fractions are predicted.
pub const RESOURCE_NAMES: [&str; 4] = ["lut", "ff", "dsp", "bram"];

/// Number of prediction targets (normalized performance + four resources).
pub const N_TARGETS: usize = 5;

// ---------------------------------------------------------------------------
// Node and edge types
// ---------------------------------------------------------------------------

/// Node taxonomy. `Icmp` is the distinguished normal subkind marking a
/// loop-condition instruction; each loop has exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Normal,
    Icmp,
    Pseudo,
    Pragma,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::Normal,
        NodeKind::Icmp,
        NodeKind::Pseudo,
        NodeKind::Pragma,
    ];

    pub fn index(self) -> usize {
        match self {
            NodeKind::Normal => 0,
            NodeKind::Icmp => 1,
            NodeKind::Pseudo => 2,
            NodeKind::Pragma => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Normal => "normal",
            NodeKind::Icmp => "icmp",
            NodeKind::Pseudo => "pseudo",
            NodeKind::Pragma => "pragma",
        }
    }
}

/// Edge taxonomy. Reverse twins carry the same type with `reversed = true`
/// so message passing can distinguish the two directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    Control,
    Data,
    BlockMembership,
    PragmaAttachment,
}

impl EdgeType {
    pub const ALL: [EdgeType; 4] = [
        EdgeType::Control,
        EdgeType::Data,
        EdgeType::BlockMembership,
        EdgeType::PragmaAttachment,
    ];

    pub fn index(self) -> usize {
        match self {
            EdgeType::Control => 0,
            EdgeType::Data => 1,
            EdgeType::BlockMembership => 2,
            EdgeType::PragmaAttachment => 3,
        }
    }
}

/// Number of directed edge classes seen by message passing
/// (four types, each in forward and reverse direction).
pub const EDGE_CLASSES: usize = 8;

/// Directed edge-class index for `(etype, reversed)`.
pub fn edge_class(etype: EdgeType, reversed: bool) -> usize {
    etype.index() * 2 + reversed as usize
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub kind: NodeKind,
    pub block_id: u32,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    #[serde(rename = "t")]
    pub etype: EdgeType,
    #[serde(rename = "rev", default)]
    pub reversed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub id: u32,
    /// Human-readable tag, e.g. `loop_header.l1` or `body.l2`.
    pub tag: String,
}

// ---------------------------------------------------------------------------
// Pragmas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PragmaKind {
    Parallel,
    Pipeline,
    Tiling,
}

impl PragmaKind {
    pub const ALL: [PragmaKind; 3] = [PragmaKind::Parallel, PragmaKind::Pipeline, PragmaKind::Tiling];

    pub fn index(self) -> usize {
        match self {
            PragmaKind::Parallel => 0,
            PragmaKind::Pipeline => 1,
            PragmaKind::Tiling => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PragmaKind::Parallel => "parallel",
            PragmaKind::Pipeline => "pipeline",
            PragmaKind::Tiling => "tiling",
        }
    }
}

/// Pipeline pragma options. The `Ord` impl fixes the enumeration order
/// (`Off < Flatten < Coarse`) used by the deterministic design DFS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipeMode {
    Off,
    Flatten,
    Coarse,
}

impl PipeMode {
    pub const ALL: [PipeMode; 3] = [PipeMode::Off, PipeMode::Flatten, PipeMode::Coarse];
}

/// One chosen pragma value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PragmaValue {
    Int(u32),
    Pipe(PipeMode),
}

impl fmt::Display for PragmaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PragmaValue::Int(v) => write!(f, "{v}"),
            PragmaValue::Pipe(PipeMode::Off) => write!(f, "off"),
            PragmaValue::Pipe(PipeMode::Flatten) => write!(f, "flatten"),
            PragmaValue::Pipe(PipeMode::Coarse) => write!(f, "coarse"),
        }
    }
}

/// A tunable pragma slot: its kind, legal values, and the block it modifies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PragmaSlot {
    pub slot_id: String,
    pub kind: PragmaKind,
    /// Legal values in ascending enumeration order. For `Parallel`/`Tiling`
    /// these are positive integers including 1; for `Pipeline` the three
    /// modes `Off`, `Flatten`, `Coarse`.
    pub legal_values: Vec<PragmaValue>,
    pub target_block: u32,
    /// Node id of the pragma node attached to this slot.
    pub pragma_node: u32,
}

/// Assignment of one value to every pragma slot of a kernel, stored
/// positionally in slot order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PragmaDesign {
    pub values: Vec<PragmaValue>,
}

impl PragmaDesign {
    pub fn new(values: Vec<PragmaValue>) -> Self {
        PragmaDesign { values }
    }

    /// Value chosen for `slot_id`, if that slot exists.
    pub fn get(&self, slots: &[PragmaSlot], slot_id: &str) -> Option<PragmaValue> {
        slots
            .iter()
            .position(|s| s.slot_id == slot_id)
            .map(|i| self.values[i])
    }

    /// Checks that every slot has exactly one value drawn from its legal set.
    pub fn validate(&self, slots: &[PragmaSlot]) -> Result<()> {
        if self.values.len() != slots.len() {
            return Err(Error::data(format!(
                "design has {} values for {} slots",
                self.values.len(),
                slots.len()
            )));
        }
        for (v, s) in self.values.iter().zip(slots) {
            if !s.legal_values.contains(v) {
                return Err(Error::data(format!(
                    "value {v} outside legal set of slot {}",
                    s.slot_id
                )));
            }
        }
        Ok(())
    }

    /// Map form keyed by slot id, used by the JSON Lines sample schema.
    pub fn to_map(&self, slots: &[PragmaSlot]) -> std::collections::BTreeMap<String, PragmaValue> {
        slots
            .iter()
            .zip(&self.values)
            .map(|(s, v)| (s.slot_id.clone(), *v))
            .collect()
    }

    /// Rebuilds the positional form from the map form.
    pub fn from_map(
        slots: &[PragmaSlot],
        map: &std::collections::BTreeMap<String, PragmaValue>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(slots.len());
        for s in slots {
            let v = map
                .get(&s.slot_id)
                .ok_or_else(|| Error::data(format!("design missing slot {}", s.slot_id)))?;
            values.push(*v);
        }
        if map.len() != slots.len() {
            let known: BTreeSet<_> = slots.iter().map(|s| s.slot_id.as_str()).collect();
            let extra: Vec<_> = map.keys().filter(|k| !known.contains(k.as_str())).collect();
            return Err(Error::data(format!("design has unknown slots: {extra:?}")));
        }
        let d = PragmaDesign { values };
        d.validate(slots)?;
        Ok(d)
    }
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Prediction target: normalized performance plus four resource-utilization
/// fractions (LUT, FF, DSP, BRAM), each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub perf: f64,
    pub util: [f64; 4],
}

impl Label {
    pub fn new(perf: f64, util: [f64; 4]) -> Result<Self> {
        if !perf.is_finite() {
            return Err(Error::data("label perf must be finite"));
        }
        for (u, name) in util.iter().zip(RESOURCE_NAMES) {
            if !(0.0..=1.0).contains(u) {
                return Err(Error::data(format!("label util {name}={u} outside [0,1]")));
            }
        }
        Ok(Label { perf, util })
    }

    /// Five-target vector `[perf, lut, ff, dsp, bram]`.
    pub fn to_vec(&self) -> [f64; N_TARGETS] {
        [self.perf, self.util[0], self.util[1], self.util[2], self.util[3]]
    }
}

/// Normalized performance for a latency in clock cycles:
/// `0.5 * log2(1e7 / latency)`. Higher is better.
pub fn normalize_latency(latency: f64) -> Result<f64> {
    if !(latency > 0.0) {
        return Err(Error::data(format!("latency must be positive, got {latency}")));
    }
    Ok(0.5 * (LATENCY_REF / latency).log2())
}

/// Inverse of [`normalize_latency`]: `1e7 * 2^(-2 * perf)`.
pub fn denormalize_perf(perf: f64) -> f64 {
    LATENCY_REF * (-2.0 * perf).exp2()
}

// ---------------------------------------------------------------------------
// Feature layout
// ---------------------------------------------------------------------------

/// Describes the fixed-width node feature layout for a configurable number
/// of opcode/category channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub categories: usize,
}

impl FeatureLayout {
    pub fn new(categories: usize) -> Self {
        FeatureLayout { categories }
    }

    pub fn width(&self) -> usize {
        KIND_CHANNELS + self.categories + PRAGMA_CHANNELS
    }

    pub fn kind_offset(&self) -> usize {
        0
    }

    pub fn category_offset(&self) -> usize {
        KIND_CHANNELS
    }

    pub fn pragma_offset(&self) -> usize {
        KIND_CHANNELS + self.categories
    }

    /// Base feature vector for a node of `kind` with category `cat`
    /// (pragma channels start at zero).
    pub fn encode(&self, kind: NodeKind, cat: Option<usize>) -> Vec<f64> {
        let mut f = vec![0.0; self.width()];
        f[kind.index()] = 1.0;
        if let Some(c) = cat {
            assert!(c < self.categories, "category {c} out of range {}", self.categories);
            f[self.category_offset() + c] = 1.0;
        }
        f
    }
}

/// Five-channel encoding of a chosen pragma value:
/// `[parallel log2(v), tiling log2(v), pipe off, pipe flatten, pipe coarse]`.
pub fn pragma_encoding(kind: PragmaKind, value: PragmaValue) -> Result<[f64; PRAGMA_CHANNELS]> {
    let mut enc = [0.0; PRAGMA_CHANNELS];
    match (kind, value) {
        (PragmaKind::Parallel, PragmaValue::Int(v)) if v >= 1 => enc[0] = (v as f64).log2(),
        (PragmaKind::Tiling, PragmaValue::Int(v)) if v >= 1 => enc[1] = (v as f64).log2(),
        (PragmaKind::Pipeline, PragmaValue::Pipe(m)) => {
            enc[2 + (m as usize)] = 1.0;
        }
        _ => {
            return Err(Error::data(format!(
                "value {value} is not legal for a {} pragma",
                kind.name()
            )))
        }
    }
    Ok(enc)
}

// ---------------------------------------------------------------------------
// The graph
// ---------------------------------------------------------------------------

/// A typed control-data-flow graph with pseudo block nodes, pragma slots,
/// and a fixed feature layout. Immutable by convention after construction;
/// [`CdfGraph::apply_pragma_design`] returns a modified copy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdfGraph {
    #[serde(rename = "v")]
    pub version: u32,
    pub layout: FeatureLayout,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub blocks: Vec<Block>,
    pub pragma_slots: Vec<PragmaSlot>,
}

impl CdfGraph {
    pub fn new(
        layout: FeatureLayout,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        blocks: Vec<Block>,
        pragma_slots: Vec<PragmaSlot>,
    ) -> Self {
        CdfGraph {
            version: SCHEMA_VERSION,
            layout,
            nodes,
            edges,
            blocks,
            pragma_slots,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn has_pseudo_nodes(&self) -> bool {
        self.nodes.iter().any(|n| n.kind == NodeKind::Pseudo)
    }

    /// Pseudo node id for `block_id`, if inserted.
    pub fn pseudo_of_block(&self, block_id: u32) -> Option<u32> {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Pseudo && n.block_id == block_id)
            .map(|n| n.id)
    }

    /// Structural validation: referenced blocks and nodes exist, features
    /// have the layout width, slots are well-formed.
    pub fn validate(&self) -> Result<()> {
        let width = self.layout.width();
        let block_ids: BTreeSet<u32> = self.blocks.iter().map(|b| b.id).collect();
        if block_ids.len() != self.blocks.len() {
            return Err(Error::data("duplicate block ids"));
        }
        let node_ids: BTreeSet<u32> = self.nodes.iter().map(|n| n.id).collect();
        if node_ids.len() != self.nodes.len() {
            return Err(Error::data("duplicate node ids"));
        }
        for n in &self.nodes {
            if !block_ids.contains(&n.block_id) {
                return Err(Error::data(format!(
                    "node {} references missing block {}",
                    n.id, n.block_id
                )));
            }
            if n.feature.len() != width {
                return Err(Error::data(format!(
                    "node {} feature width {} != layout width {width}",
                    n.id,
                    n.feature.len()
                )));
            }
        }
        for e in &self.edges {
            if !node_ids.contains(&e.src) || !node_ids.contains(&e.dst) {
                return Err(Error::data(format!(
                    "edge {} -> {} references missing node",
                    e.src, e.dst
                )));
            }
        }
        for s in &self.pragma_slots {
            if s.legal_values.is_empty() {
                return Err(Error::data(format!("slot {} has empty legal set", s.slot_id)));
            }
            if !block_ids.contains(&s.target_block) {
                return Err(Error::data(format!(
                    "slot {} targets missing block {}",
                    s.slot_id, s.target_block
                )));
            }
            if !node_ids.contains(&s.pragma_node) {
                return Err(Error::data(format!(
                    "slot {} references missing pragma node {}",
                    s.slot_id, s.pragma_node
                )));
            }
        }
        Ok(())
    }

    /// Inserts one pseudo node per basic block and connects it to every
    /// member of that block with block-membership edge pairs. All prior
    /// nodes and edges are preserved.
    ///
    /// Rejects graphs that already contain pseudo nodes (never
    /// double-inserts) and graphs with an empty block.
    pub fn insert_pseudo_nodes(&self) -> Result<CdfGraph> {
        if self.has_pseudo_nodes() {
            return Err(Error::data("graph already has pseudo nodes"));
        }
        if self.blocks.is_empty() {
            return Err(Error::data("graph has no blocks"));
        }
        for b in &self.blocks {
            if !self.nodes.iter().any(|n| n.block_id == b.id) {
                return Err(Error::data(format!("block {} ({}) is empty", b.id, b.tag)));
            }
        }
        let mut g = self.clone();
        let mut next_id = self.nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;
        for b in &self.blocks {
            let pseudo_id = next_id;
            next_id += 1;
            g.nodes.push(Node {
                id: pseudo_id,
                kind: NodeKind::Pseudo,
                block_id: b.id,
                feature: self.layout.encode(NodeKind::Pseudo, None),
            });
            for n in &self.nodes {
                if n.block_id == b.id {
                    g.edges.push(Edge {
                        src: pseudo_id,
                        dst: n.id,
                        etype: EdgeType::BlockMembership,
                        reversed: false,
                    });
                    g.edges.push(Edge {
                        src: n.id,
                        dst: pseudo_id,
                        etype: EdgeType::BlockMembership,
                        reversed: true,
                    });
                }
            }
        }
        Ok(g)
    }

    /// Returns a copy of the graph with each pragma node's feature vector
    /// encoding its chosen value. All other features are unchanged.
    pub fn apply_pragma_design(&self, design: &PragmaDesign) -> Result<CdfGraph> {
        design.validate(&self.pragma_slots)?;
        let mut g = self.clone();
        let off = self.layout.pragma_offset();
        for (slot, value) in self.pragma_slots.iter().zip(&design.values) {
            let enc = pragma_encoding(slot.kind, *value)?;
            let idx = g
                .node_index(slot.pragma_node)
                .ok_or_else(|| Error::data(format!("slot {} pragma node missing", slot.slot_id)))?;
            g.nodes[idx].feature[off..off + PRAGMA_CHANNELS].copy_from_slice(&enc);
        }
        Ok(g)
    }

    /// Total design-space size (product of legal-value counts), saturating
    /// at `u64::MAX`.
    pub fn design_space_size(&self) -> u64 {
        self.pragma_slots
            .iter()
            .fold(1u64, |acc, s| acc.saturating_mul(s.legal_values.len() as u64))
    }

    /// Deterministic depth-first enumeration of the design space in slot
    /// order with values ascending, truncated at `limit`.
    pub fn enumerate_designs(&self, limit: u64) -> DesignIter<'_> {
        DesignIter {
            slots: &self.pragma_slots,
            cursor: vec![0; self.pragma_slots.len()],
            emitted: 0,
            limit,
            done: false,
        }
    }
}

/// Iterator over the Cartesian product of legal values in slot order
/// (an odometer: last slot varies fastest, values ascending).
pub struct DesignIter<'a> {
    slots: &'a [PragmaSlot],
    cursor: Vec<usize>,
    emitted: u64,
    limit: u64,
    done: bool,
}

impl<'a> Iterator for DesignIter<'a> {
    type Item = PragmaDesign;

    fn next(&mut self) -> Option<PragmaDesign> {
        if self.done || self.emitted >= self.limit {
            return None;
        }
        let design = PragmaDesign::new(
            self.slots
                .iter()
                .zip(&self.cursor)
                .map(|(s, &i)| s.legal_values[i])
                .collect(),
        );
        self.emitted += 1;
        // advance odometer
        let mut pos = self.slots.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            self.cursor[pos] += 1;
            if self.cursor[pos] < self.slots[pos].legal_values.len() {
                break;
            }
            self.cursor[pos] = 0;
        }
        Some(design)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> FeatureLayout {
        FeatureLayout::new(6)
    }

    fn tiny_raw_graph() -> CdfGraph {
        let l = layout();
        let nodes = vec![
            Node { id: 0, kind: NodeKind::Normal, block_id: 0, feature: l.encode(NodeKind::Normal, Some(0)) },
            Node { id: 1, kind: NodeKind::Normal, block_id: 0, feature: l.encode(NodeKind::Normal, Some(1)) },
            Node { id: 2, kind: NodeKind::Icmp, block_id: 0, feature: l.encode(NodeKind::Icmp, Some(2)) },
        ];
        let edges = vec![
            Edge { src: 0, dst: 1, etype: EdgeType::Data, reversed: false },
            Edge { src: 1, dst: 0, etype: EdgeType::Data, reversed: true },
        ];
        CdfGraph::new(l, nodes, edges, vec![Block { id: 0, tag: "b0".into() }], vec![])
    }

    #[test]
    fn pseudo_insertion_single_block() {
        let raw = tiny_raw_graph();
        let g = raw.insert_pseudo_nodes().unwrap();
        assert_eq!(g.n_nodes(), 4);
        let membership = g
            .edges
            .iter()
            .filter(|e| e.etype == EdgeType::BlockMembership)
            .count();
        // one pair per member node
        assert_eq!(membership, 6);
        g.validate().unwrap();
    }

    #[test]
    fn pseudo_insertion_rejects_empty_blocks_and_reinsertion() {
        let mut raw = tiny_raw_graph();
        raw.blocks.push(Block { id: 1, tag: "empty".into() });
        assert!(raw.insert_pseudo_nodes().is_err());

        let raw = tiny_raw_graph();
        let g = raw.insert_pseudo_nodes().unwrap();
        assert!(g.insert_pseudo_nodes().is_err());

        let no_blocks = CdfGraph::new(layout(), vec![], vec![], vec![], vec![]);
        assert!(no_blocks.insert_pseudo_nodes().is_err());
    }

    #[test]
    fn pseudo_insertion_multi_block_counts() {
        // 3 blocks with 2, 3, 4 member nodes
        let l = layout();
        let mut nodes = Vec::new();
        let mut id = 0;
        for (b, count) in [(0u32, 2usize), (1, 3), (2, 4)] {
            for _ in 0..count {
                nodes.push(Node {
                    id,
                    kind: NodeKind::Normal,
                    block_id: b,
                    feature: l.encode(NodeKind::Normal, Some(0)),
                });
                id += 1;
            }
        }
        let blocks = (0..3).map(|i| Block { id: i, tag: format!("b{i}") }).collect();
        let raw = CdfGraph::new(l, nodes, vec![], blocks, vec![]);
        let g = raw.insert_pseudo_nodes().unwrap();
        assert_eq!(g.n_nodes(), 9 + 3);
        let membership = g
            .edges
            .iter()
            .filter(|e| e.etype == EdgeType::BlockMembership)
            .count();
        assert_eq!(membership, 2 * (2 + 3 + 4));
    }

    fn slot(id: &str, kind: PragmaKind, values: Vec<PragmaValue>, node: u32) -> PragmaSlot {
        PragmaSlot {
            slot_id: id.into(),
            kind,
            legal_values: values,
            target_block: 0,
            pragma_node: node,
        }
    }

    fn graph_with_slots() -> CdfGraph {
        let l = layout();
        let nodes = vec![
            Node { id: 0, kind: NodeKind::Normal, block_id: 0, feature: l.encode(NodeKind::Normal, Some(0)) },
            Node { id: 1, kind: NodeKind::Pragma, block_id: 0, feature: l.encode(NodeKind::Pragma, Some(3)) },
            Node { id: 2, kind: NodeKind::Pragma, block_id: 0, feature: l.encode(NodeKind::Pragma, Some(4)) },
        ];
        let slots = vec![
            slot(
                "para.l0",
                PragmaKind::Parallel,
                vec![PragmaValue::Int(1), PragmaValue::Int(2), PragmaValue::Int(8)],
                1,
            ),
            slot(
                "pipe.l0",
                PragmaKind::Pipeline,
                PipeMode::ALL.iter().map(|m| PragmaValue::Pipe(*m)).collect(),
                2,
            ),
        ];
        CdfGraph::new(l, nodes, vec![], vec![Block { id: 0, tag: "b0".into() }], slots)
    }

    #[test]
    fn apply_design_encodes_values() {
        let g = graph_with_slots();
        let off = g.layout.pragma_offset();

        let d = PragmaDesign::new(vec![PragmaValue::Int(1), PragmaValue::Pipe(PipeMode::Off)]);
        let a = g.apply_pragma_design(&d).unwrap();
        assert_eq!(a.nodes[1].feature[off], 0.0); // log2(1) = 0
        assert_eq!(&a.nodes[2].feature[off + 2..off + 5], &[1.0, 0.0, 0.0]);

        let d = PragmaDesign::new(vec![PragmaValue::Int(8), PragmaValue::Pipe(PipeMode::Coarse)]);
        let a = g.apply_pragma_design(&d).unwrap();
        assert_eq!(a.nodes[1].feature[off], 3.0); // log2(8) = 3
        assert_eq!(&a.nodes[2].feature[off + 2..off + 5], &[0.0, 0.0, 1.0]);
        // non-pragma node untouched
        assert_eq!(a.nodes[0].feature, g.nodes[0].feature);
    }

    #[test]
    fn apply_design_rejects_bad_values() {
        let g = graph_with_slots();
        let d = PragmaDesign::new(vec![PragmaValue::Int(5), PragmaValue::Pipe(PipeMode::Off)]);
        assert!(g.apply_pragma_design(&d).is_err());
        let d = PragmaDesign::new(vec![PragmaValue::Int(1)]);
        assert!(g.apply_pragma_design(&d).is_err());
        // unknown slot id in map form
        let mut map = std::collections::BTreeMap::new();
        map.insert("para.l0".to_string(), PragmaValue::Int(1));
        map.insert("pipe.l0".to_string(), PragmaValue::Pipe(PipeMode::Off));
        map.insert("bogus".to_string(), PragmaValue::Int(1));
        assert!(PragmaDesign::from_map(&g.pragma_slots, &map).is_err());
    }

    #[test]
    fn latency_normalization_formula() {
        assert_eq!(normalize_latency(1e7).unwrap(), 0.0);
        assert!((normalize_latency(2.5e6).unwrap() - 1.0).abs() < 1e-12);
        assert!((normalize_latency(4e7).unwrap() - (-1.0)).abs() < 1e-12);
        assert!(normalize_latency(0.0).is_err());
        assert!(normalize_latency(-3.0).is_err());
    }

    #[test]
    fn enumeration_counts_and_truncation() {
        let g = graph_with_slots();
        assert_eq!(g.design_space_size(), 9);
        let designs: Vec<_> = g.enumerate_designs(100).collect();
        assert_eq!(designs.len(), 9);
        // distinct and deterministic order: first design is all-first values
        assert_eq!(
            designs[0].values,
            vec![PragmaValue::Int(1), PragmaValue::Pipe(PipeMode::Off)]
        );
        assert_eq!(
            designs[1].values,
            vec![PragmaValue::Int(1), PragmaValue::Pipe(PipeMode::Flatten)]
        );
        let set: BTreeSet<_> = designs.iter().cloned().collect();
        assert_eq!(set.len(), 9);

        let truncated: Vec<_> = g.enumerate_designs(4).collect();
        assert_eq!(truncated.len(), 4);
        assert_eq!(&truncated[..], &designs[..4]);

        // zero slots: single empty design
        let empty = CdfGraph::new(
            layout(),
            vec![Node { id: 0, kind: NodeKind::Normal, block_id: 0, feature: layout().encode(NodeKind::Normal, None) }],
            vec![],
            vec![Block { id: 0, tag: "b0".into() }],
            vec![],
        );
        let ds: Vec<_> = empty.enumerate_designs(10).collect();
        assert_eq!(ds.len(), 1);
        assert!(ds[0].values.is_empty());
    }

    #[test]
    fn label_bounds() {
        assert!(Label::new(1.0, [0.0, 0.5, 1.0, 0.2]).is_ok());
        assert!(Label::new(1.0, [0.0, 0.5, 1.01, 0.2]).is_err());
        assert!(Label::new(f64::NAN, [0.0; 4]).is_err());
    }
}
