//! Seeded generator of synthetic kernels with shared motifs, plus the
//! analytic oracle that stands in for an HLS toolchain.
//!
//! A kernel is a loop nest (depth <= 3) whose innermost body splices a few
//! statement motifs from a shared library; identical motif subgraphs appear
//! in multiple kernels, so target kernels genuinely reuse substructure from
//! source kernels while differing in at least one motif or loop parameter.
//! Every pragma slot, trip count, and oracle coefficient flows from the
//! run seed through named sub-streams.

pub mod oracle;

pub use oracle::{decode_design, oracle_evaluate, OracleOutcome, OracleParams};

use crate::cdfg::{
    Block, CdfGraph, Edge, EdgeType, FeatureLayout, Label, Node, NodeKind, PipeMode, PragmaDesign,
    PragmaKind, PragmaSlot, PragmaValue,
};
use crate::error::{Error, Result};
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Opcode/category channel ids used by the generator's feature layout.
pub mod cat {
    pub const ADD: usize = 0;
    pub const MUL: usize = 1;
    pub const DIV: usize = 2;
    pub const LOAD: usize = 3;
    pub const STORE: usize = 4;
    pub const PHI: usize = 5;
    pub const BRANCH: usize = 6;
    pub const ICMP: usize = 7;
    pub const CONST: usize = 8;
    pub const PRAGMA_PARALLEL: usize = 9;
    pub const PRAGMA_PIPELINE: usize = 10;
    pub const PRAGMA_TILING: usize = 11;
    pub const COUNT: usize = 12;

    pub fn of_pragma(kind: crate::cdfg::PragmaKind) -> usize {
        match kind {
            crate::cdfg::PragmaKind::Parallel => PRAGMA_PARALLEL,
            crate::cdfg::PragmaKind::Pipeline => PRAGMA_PIPELINE,
            crate::cdfg::PragmaKind::Tiling => PRAGMA_TILING,
        }
    }
}

/// Bounds on per-kernel design-space sizes.
pub const SPACE_MIN: u64 = 100;
pub const SPACE_MAX: u64 = 100_000;

/// A statement motif: a small op-chain subgraph spliced verbatim into
/// kernel bodies.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Motif {
    pub motif_id: u32,
    /// Category ids of the ops in chain order.
    pub ops: Vec<usize>,
    pub cost: MotifCost,
}

/// Latency/resource coefficients of one motif.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MotifCost {
    /// Compute cycles per innermost iteration.
    pub lat_comp: f64,
    /// Memory cycles per innermost iteration (reduced by tiling).
    pub lat_mem: f64,
    pub mults: u32,
    pub mem_ops: u32,
    pub other_ops: u32,
}

/// One loop level of a kernel template, outermost first.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoopLevel {
    pub trip_count: u32,
    /// Block id of this level's header block.
    pub header_block: u32,
    /// Legal parallel factors, ascending, always including 1.
    pub parallel_values: Vec<u32>,
    pub has_pipeline: bool,
    /// Legal tiling factors (ascending, including 1) when the level has a
    /// tiling slot.
    pub tiling_values: Option<Vec<u32>>,
}

/// Loop-nest structure and statement mix of one kernel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelTemplate {
    pub template_id: String,
    pub levels: Vec<LoopLevel>,
    /// Motifs spliced into the innermost body, in order (no repeats).
    pub motif_ids: Vec<u32>,
    /// Motif ids shared with at least one other kernel of the suite.
    pub shared_motif_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    Target,
}

/// A generated kernel: graph (pseudo nodes inserted, pragma channels
/// zeroed), template, and oracle coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kernel {
    pub id: String,
    pub split: Split,
    pub template: KernelTemplate,
    pub graph: CdfGraph,
    pub oracle: OracleParams,
    pub space_size: u64,
    /// For target kernels, the source kernel this one was derived from.
    pub parent_source: Option<String>,
}

impl Kernel {
    /// Design at position `index` of the deterministic enumeration order.
    pub fn design_by_index(&self, index: u64) -> PragmaDesign {
        let slots = &self.graph.pragma_slots;
        let mut strides = vec![1u64; slots.len()];
        for i in (0..slots.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * slots[i + 1].legal_values.len() as u64;
        }
        let values = slots
            .iter()
            .zip(&strides)
            .map(|(s, &stride)| {
                let digit = (index / stride) as usize % s.legal_values.len();
                s.legal_values[digit]
            })
            .collect();
        PragmaDesign::new(values)
    }

    /// The all-default design: parallel 1, pipeline off, tiling 1.
    pub fn default_design(&self) -> PragmaDesign {
        PragmaDesign::new(
            self.graph
                .pragma_slots
                .iter()
                .map(|slot| match slot.kind {
                    PragmaKind::Parallel | PragmaKind::Tiling => PragmaValue::Int(1),
                    PragmaKind::Pipeline => PragmaValue::Pipe(PipeMode::Off),
                })
                .collect(),
        )
    }
}

/// A full generated suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suite {
    pub seed: u64,
    pub motifs: Vec<Motif>,
    pub kernels: Vec<Kernel>,
}

impl Suite {
    pub fn sources(&self) -> impl Iterator<Item = &Kernel> {
        self.kernels.iter().filter(|k| k.split == Split::Source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Kernel> {
        self.kernels.iter().filter(|k| k.split == Split::Target)
    }

    pub fn kernel(&self, id: &str) -> Option<&Kernel> {
        self.kernels.iter().find(|k| k.id == id)
    }
}

/// One labeled sample of a kernel's design space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub design: PragmaDesign,
    pub label: Label,
    pub valid: bool,
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn divisors(n: u32) -> Vec<u32> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn gen_motif_library(rng: &mut ChaCha8Rng, count: usize) -> Vec<Motif> {
    let arith = [cat::ADD, cat::MUL, cat::DIV, cat::CONST];
    (0..count)
        .map(|i| {
            let len = rng.gen_range(4..=7);
            let mut ops = vec![cat::LOAD];
            for _ in 1..len - 1 {
                if rng.gen_bool(0.25) {
                    ops.push(*[cat::LOAD, cat::STORE].choose(rng).unwrap());
                } else {
                    ops.push(*arith.choose(rng).unwrap());
                }
            }
            ops.push(if rng.gen_bool(0.7) { cat::STORE } else { cat::ADD });
            let mults = ops.iter().filter(|&&c| c == cat::MUL || c == cat::DIV).count() as u32;
            let mem_ops = ops.iter().filter(|&&c| c == cat::LOAD || c == cat::STORE).count() as u32;
            let other_ops = ops.len() as u32 - mults - mem_ops;
            Motif {
                motif_id: i as u32,
                ops,
                cost: MotifCost {
                    lat_comp: rng.gen_range(2.0..9.0),
                    lat_mem: rng.gen_range(2.0..10.0),
                    mults,
                    mem_ops,
                    other_ops,
                },
            }
        })
        .collect()
}

/// Legal parallel set for a trip count: its divisors (subsampled when
/// numerous) plus `nd_count` non-divisors.
fn parallel_set(trip: u32, nd_count: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut parallel = divisors(trip);
    if parallel.len() > 6 {
        parallel = vec![
            parallel[0],
            parallel[1],
            parallel[2],
            parallel[parallel.len() / 2],
            parallel[parallel.len() - 2],
            parallel[parallel.len() - 1],
        ];
    }
    let mut added = 0;
    let mut candidate = 3u32;
    while added < nd_count && candidate < trip {
        if trip % candidate != 0 && !parallel.contains(&candidate) {
            parallel.push(candidate);
            added += 1;
        }
        candidate += rng.gen_range(1..=3);
    }
    parallel.sort_unstable();
    parallel.dedup();
    parallel
}

fn tiling_set(trip: u32) -> Vec<u32> {
    let tv: Vec<u32> = [1u32, 2, 4, 8, 16].iter().copied().filter(|&t| t <= trip).collect();
    if tv.len() < 2 {
        vec![1, 2]
    } else {
        tv
    }
}

fn gen_levels(rng: &mut ChaCha8Rng, depth: usize) -> Vec<LoopLevel> {
    let trips_outer = [8u32, 12, 16, 24, 32];
    let trips_inner = [16u32, 24, 32, 48, 64];
    (0..depth)
        .map(|lvl| {
            let trip = if depth == 1 || lvl == depth - 1 {
                *trips_inner.choose(rng).unwrap()
            } else {
                *trips_outer.choose(rng).unwrap()
            };
            let nd_count = if depth >= 3 { 1 } else { 2 };
            LoopLevel {
                trip_count: trip,
                header_block: lvl as u32,
                parallel_values: parallel_set(trip, nd_count, rng),
                has_pipeline: depth == 1 || rng.gen_bool(0.75),
                tiling_values: (depth == 1 || rng.gen_bool(0.55)).then(|| tiling_set(trip)),
            }
        })
        .collect()
}

fn space_of_levels(levels: &[LoopLevel]) -> u64 {
    levels.iter().fold(1u64, |acc, l| {
        let mut s = l.parallel_values.len() as u64;
        if l.has_pipeline {
            s *= PipeMode::ALL.len() as u64;
        }
        if let Some(tv) = &l.tiling_values {
            s *= tv.len() as u64;
        }
        acc.saturating_mul(s)
    })
}

/// Shrinks or grows slot sets until the space size is within bounds.
fn repair_space(levels: &mut [LoopLevel], rng: &mut ChaCha8Rng) {
    while space_of_levels(levels) > SPACE_MAX {
        if let Some(l) = levels.iter_mut().find(|l| l.tiling_values.is_some()) {
            l.tiling_values = None;
            continue;
        }
        let widest = levels
            .iter_mut()
            .max_by_key(|l| l.parallel_values.len())
            .expect("at least one level");
        if widest.parallel_values.len() > 3 {
            let mid = widest.parallel_values.len() / 2;
            widest.parallel_values.remove(mid);
            continue;
        }
        if let Some(l) = levels.iter_mut().find(|l| l.has_pipeline) {
            l.has_pipeline = false;
            continue;
        }
        break;
    }
    while space_of_levels(levels) < SPACE_MIN {
        let last = levels.len() - 1;
        let l = &mut levels[last];
        if !l.has_pipeline {
            l.has_pipeline = true;
            continue;
        }
        if l.tiling_values.is_none() {
            l.tiling_values = Some(tiling_set(l.trip_count));
            continue;
        }
        let mut candidate = rng.gen_range(2..l.trip_count.max(4));
        let mut guard = 0;
        while l.parallel_values.contains(&candidate) && guard < 64 {
            candidate = rng.gen_range(2..l.trip_count.max(4));
            guard += 1;
        }
        if guard >= 64 {
            break;
        }
        l.parallel_values.push(candidate);
        l.parallel_values.sort_unstable();
        l.parallel_values.dedup();
    }
}

/// Builds the CDFG (pseudo nodes inserted) plus pragma slots for a template.
fn build_graph(template: &KernelTemplate, motifs: &[Motif], layout: FeatureLayout) -> Result<CdfGraph> {
    let levels = &template.levels;
    let body_block = levels.len() as u32;
    let mut blocks: Vec<Block> = levels
        .iter()
        .enumerate()
        .map(|(i, _)| Block { id: i as u32, tag: format!("loop_header.l{i}") })
        .collect();
    blocks.push(Block { id: body_block, tag: "body".into() });

    let mut nodes: Vec<Node> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut next_id = 0u32;
    let mut push_node = |nodes: &mut Vec<Node>, kind, block_id, mut feature: Vec<f64>, trip: Option<u32>| {
        if let Some(t) = trip {
            // loop extent rides on the icmp node's first numeric channel
            feature[layout.pragma_offset()] = (t as f64).log2();
        }
        let id = next_id;
        next_id += 1;
        nodes.push(Node { id, kind, block_id, feature });
        id
    };
    fn link(edges: &mut Vec<Edge>, etype: EdgeType, src: u32, dst: u32) {
        edges.push(Edge { src, dst, etype, reversed: false });
        edges.push(Edge { src: dst, dst: src, etype, reversed: true });
    }

    // loop headers: phi -> icmp -> branch
    let mut header_nodes = Vec::new();
    for (lvl, level) in levels.iter().enumerate() {
        let b = lvl as u32;
        let phi = push_node(&mut nodes, NodeKind::Normal, b, layout.encode(NodeKind::Normal, Some(cat::PHI)), None);
        let icmp = push_node(&mut nodes, NodeKind::Icmp, b, layout.encode(NodeKind::Icmp, Some(cat::ICMP)), Some(level.trip_count));
        let br = push_node(&mut nodes, NodeKind::Normal, b, layout.encode(NodeKind::Normal, Some(cat::BRANCH)), None);
        link(&mut edges, EdgeType::Data, phi, icmp);
        link(&mut edges, EdgeType::Control, icmp, br);
        if let Some(&(_, _, prev_br)) = header_nodes.last() {
            link(&mut edges, EdgeType::Control, prev_br, phi);
        }
        header_nodes.push((phi, icmp, br));
    }

    // body: splice motif subgraphs, chained by data edges
    let innermost = *header_nodes.last().unwrap();
    let mut prev_tail: Option<u32> = None;
    let mut body_first: Option<u32> = None;
    for mid in &template.motif_ids {
        let motif = motifs
            .iter()
            .find(|m| m.motif_id == *mid)
            .ok_or_else(|| Error::data(format!("unknown motif {mid}")))?;
        let mut prev: Option<u32> = None;
        for &op in &motif.ops {
            let n = push_node(&mut nodes, NodeKind::Normal, body_block, layout.encode(NodeKind::Normal, Some(op)), None);
            if body_first.is_none() {
                body_first = Some(n);
            }
            if let Some(p) = prev {
                link(&mut edges, EdgeType::Data, p, n);
            } else if let Some(t) = prev_tail {
                link(&mut edges, EdgeType::Data, t, n);
            }
            prev = Some(n);
        }
        prev_tail = prev;
    }
    let body_first = body_first.ok_or_else(|| Error::data("kernel body is empty"))?;
    link(&mut edges, EdgeType::Control, innermost.2, body_first);
    // loop back edge into the innermost header
    link(&mut edges, EdgeType::Control, prev_tail.unwrap(), innermost.0);

    // pragma nodes and slots, in [parallel, pipeline, tiling] order per level
    let mut slots = Vec::new();
    for (lvl, level) in levels.iter().enumerate() {
        let icmp = header_nodes[lvl].1;
        let mut add_slot = |nodes: &mut Vec<Node>, edges: &mut Vec<Edge>, kind: PragmaKind, legal: Vec<PragmaValue>| {
            let node = push_node(
                nodes,
                NodeKind::Pragma,
                lvl as u32,
                layout.encode(NodeKind::Pragma, Some(cat::of_pragma(kind))),
                None,
            );
            link(edges, EdgeType::PragmaAttachment, node, icmp);
            slots.push(PragmaSlot {
                slot_id: format!("{}.l{lvl}", kind.name()),
                kind,
                legal_values: legal,
                target_block: lvl as u32,
                pragma_node: node,
            });
        };
        add_slot(
            &mut nodes,
            &mut edges,
            PragmaKind::Parallel,
            level.parallel_values.iter().map(|&v| PragmaValue::Int(v)).collect(),
        );
        if level.has_pipeline {
            add_slot(
                &mut nodes,
                &mut edges,
                PragmaKind::Pipeline,
                PipeMode::ALL.iter().map(|&m| PragmaValue::Pipe(m)).collect(),
            );
        }
        if let Some(tv) = &level.tiling_values {
            add_slot(
                &mut nodes,
                &mut edges,
                PragmaKind::Tiling,
                tv.iter().map(|&v| PragmaValue::Int(v)).collect(),
            );
        }
    }

    let raw = CdfGraph::new(layout, nodes, edges, blocks, slots);
    let graph = raw.insert_pseudo_nodes()?;
    graph.validate()?;
    Ok(graph)
}

fn gen_oracle(template: &KernelTemplate, motifs: &[Motif], rng: &mut ChaCha8Rng) -> OracleParams {
    let motif_costs: Vec<(u32, MotifCost)> = template
        .motif_ids
        .iter()
        .map(|mid| {
            let m = motifs.iter().find(|m| m.motif_id == *mid).unwrap();
            let mut c = m.cost.clone();
            c.lat_comp *= rng.gen_range(0.9..1.1);
            c.lat_mem *= rng.gen_range(0.9..1.1);
            (*mid, c)
        })
        .collect();

    let knees = template
        .levels
        .iter()
        .map(|l| {
            let cap = l.trip_count.min(32);
            let opts: Vec<u32> = [2u32, 4, 8, 16, 32].iter().copied().filter(|&k| k <= cap).collect();
            *opts.choose(rng).unwrap_or(&2)
        })
        .collect();

    let mults: f64 = motif_costs.iter().map(|(_, c)| c.mults as f64).sum::<f64>().max(0.25);
    let mem_ops: f64 = motif_costs.iter().map(|(_, c)| c.mem_ops as f64).sum::<f64>().max(0.25);
    let others: f64 = motif_costs.iter().map(|(_, c)| c.other_ops as f64).sum();
    let op_weight = [others + mem_ops, others + mults, mults, mem_ops];

    let max_copies: f64 = template
        .levels
        .iter()
        .map(|l| *l.parallel_values.iter().max().unwrap() as f64)
        .product();
    // place the 80% resource frontier strictly inside the reachable range
    let copies_at_08 = (max_copies * rng.gen_range(0.35..0.9)).max(4.0);

    let res_base = [
        rng.gen_range(0.02..0.06),
        rng.gen_range(0.02..0.06),
        rng.gen_range(0.01..0.05),
        rng.gen_range(0.02..0.06),
    ];
    let mut res_unit = [0.0; 4];
    for r in 0..4 {
        res_unit[r] =
            (0.8 - res_base[r]) / (op_weight[r].max(0.25) * copies_at_08) * rng.gen_range(0.8..1.25);
    }

    OracleParams {
        motif_costs,
        level_overhead: template.levels.iter().map(|_| rng.gen_range(2.0..8.0)).collect(),
        knees,
        flatten_factor: rng.gen_range(0.35..0.7),
        coarse_ii_ratio: rng.gen_range(0.25..0.6),
        latency_scale: 1.0,
        res_base,
        res_unit,
        res_pipe: [
            rng.gen_range(0.004..0.02),
            rng.gen_range(0.004..0.02),
            rng.gen_range(0.001..0.008),
            rng.gen_range(0.001..0.008),
        ],
        res_tile: [0.002, 0.002, 0.001, rng.gen_range(0.01..0.025)],
        mem_tile_mu: rng.gen_range(0.1..0.5),
    }
}

fn gen_kernel(
    id: String,
    split: Split,
    motifs: &[Motif],
    layout: FeatureLayout,
    rng: &mut ChaCha8Rng,
) -> Result<Kernel> {
    let depth = *[1usize, 2, 2, 2, 3, 3].choose(rng).unwrap();
    let mut levels = gen_levels(rng, depth);
    repair_space(&mut levels, rng);

    let motif_count = rng.gen_range(2..=3usize.min(motifs.len()));
    let mut ids: Vec<u32> = (0..motifs.len() as u32).collect();
    ids.shuffle(rng);
    let mut motif_ids: Vec<u32> = ids.into_iter().take(motif_count).collect();
    motif_ids.sort_unstable();

    let template = KernelTemplate {
        template_id: id.clone(),
        levels,
        motif_ids,
        shared_motif_ids: Vec::new(),
    };
    let graph = build_graph(&template, motifs, layout)?;
    let oracle = gen_oracle(&template, motifs, rng);
    let space_size = graph.design_space_size();
    Ok(Kernel {
        id,
        split,
        template,
        graph,
        oracle,
        space_size,
        parent_source: None,
    })
}

/// Derives a target kernel from a source: keeps shared motifs but swaps at
/// least one motif and perturbs at least one loop parameter.
fn mutate_into_target(
    id: String,
    source: &Kernel,
    motifs: &[Motif],
    layout: FeatureLayout,
    rng: &mut ChaCha8Rng,
) -> Result<Kernel> {
    let mut template = source.template.clone();
    template.template_id = id.clone();
    template.shared_motif_ids.clear();

    // swap one motif for one the source does not use
    let unused: Vec<u32> = (0..motifs.len() as u32)
        .filter(|m| !template.motif_ids.contains(m))
        .collect();
    if let Some(&replacement) = unused.as_slice().choose(rng) {
        let at = rng.gen_range(0..template.motif_ids.len());
        template.motif_ids[at] = replacement;
        template.motif_ids.sort_unstable();
        template.motif_ids.dedup();
    }
    // and perturb one trip count, regenerating that level's legal sets
    let lvl = rng.gen_range(0..template.levels.len());
    let old_trip = template.levels[lvl].trip_count;
    let choices: Vec<u32> = [8u32, 12, 16, 24, 32, 48, 64]
        .into_iter()
        .filter(|&t| t != old_trip)
        .collect();
    let new_trip = *choices.choose(rng).unwrap();
    {
        let level = &mut template.levels[lvl];
        level.trip_count = new_trip;
        level.parallel_values = parallel_set(new_trip, 2, rng);
        if level.tiling_values.is_some() {
            level.tiling_values = Some(tiling_set(new_trip));
        }
    }
    repair_space(&mut template.levels, rng);
    for (i, l) in template.levels.iter_mut().enumerate() {
        l.header_block = i as u32;
    }

    let graph = build_graph(&template, motifs, layout)?;
    let oracle = gen_oracle(&template, motifs, rng);
    let space_size = graph.design_space_size();
    Ok(Kernel {
        id,
        split: Split::Target,
        template,
        graph,
        oracle,
        space_size,
        parent_source: Some(source.id.clone()),
    })
}

/// Estimated mean normalized performance over a fixed probe of the design
/// space (all designs, valid or not, matching the dataset distribution).
fn mean_perf_estimate(kernel: &Kernel, seed: u64) -> f64 {
    let mut rng = seed::rng(seed, &format!("spacing.{}", kernel.id));
    let n = (kernel.space_size as usize).min(128);
    let idx = rand::seq::index::sample(&mut rng, kernel.space_size as usize, n);
    let mut acc = 0.0;
    for i in idx.iter() {
        let d = kernel.design_by_index(i as u64);
        let o = oracle_evaluate(kernel, &d);
        acc += crate::cdfg::normalize_latency(o.latency).expect("oracle latency positive");
    }
    acc / n as f64
}

/// Generates a suite of `n_source` source kernels and `n_target` target
/// kernels. Deterministic given `seed`. Target kernels always reuse at
/// least one motif from their parent source and differ in at least one
/// motif or loop parameter.
pub fn generate_suite(seed: u64, n_source: usize, n_target: usize, allow_no_targets: bool) -> Result<Suite> {
    if n_source < 2 {
        return Err(Error::config(format!(
            "need at least 2 source kernels, got {n_source}"
        )));
    }
    if n_target == 0 && !allow_no_targets {
        return Err(Error::config(
            "no target kernels requested; pass --allow-no-targets to generate a source-only suite",
        ));
    }
    let layout = FeatureLayout::new(cat::COUNT);
    let mut lib_rng = seed::rng(seed, "motif-lib");
    let motifs = gen_motif_library(&mut lib_rng, 10 + n_source / 3);

    let mut kernels = Vec::new();
    for k in 0..n_source {
        let id = format!("src{k:02}");
        let mut rng = seed::rng(seed, &format!("kernel.{id}"));
        kernels.push(gen_kernel(id, Split::Source, &motifs, layout, &mut rng)?);
    }
    for j in 0..n_target {
        let id = format!("tgt{j:02}");
        let mut rng = seed::rng(seed, &format!("kernel.{id}"));
        let source = kernels[j % n_source].clone();
        kernels.push(mutate_into_target(id, &source, &motifs, layout, &mut rng)?);
    }

    // space the kernels' mean performance apart: domain shift by construction
    let means: Vec<f64> = kernels.iter().map(|k| mean_perf_estimate(k, seed)).collect();
    let mut order: Vec<usize> = (0..kernels.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let mut gap_rng = seed::rng(seed, "spacing.gaps");
    let mut target_mean = 0.35;
    for &ki in &order {
        let shift = means[ki] - target_mean;
        kernels[ki].oracle.latency_scale *= (2.0f64).powf(2.0 * shift);
        target_mean += gap_rng.gen_range(0.18..0.3);
    }

    // record motif sharing
    let all_sets: Vec<(String, Vec<u32>)> = kernels
        .iter()
        .map(|k| (k.id.clone(), k.template.motif_ids.clone()))
        .collect();
    for k in kernels.iter_mut() {
        k.template.shared_motif_ids = k
            .template
            .motif_ids
            .iter()
            .copied()
            .filter(|m| all_sets.iter().any(|(id, set)| id != &k.id && set.contains(m)))
            .collect();
    }

    for k in &kernels {
        if !(SPACE_MIN..=SPACE_MAX).contains(&k.space_size) {
            return Err(Error::data(format!(
                "kernel {} space {} outside [{SPACE_MIN}, {SPACE_MAX}]",
                k.id, k.space_size
            )));
        }
    }

    Ok(Suite { seed, motifs, kernels })
}

/// Uniform sample without replacement of `n` labeled designs.
/// Deterministic given `seed`; designs are emitted in ascending
/// enumeration order.
pub fn sample_dataset(kernel: &Kernel, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n as u64 > kernel.space_size {
        return Err(Error::data(format!(
            "requested {n} samples from a space of {}",
            kernel.space_size
        )));
    }
    let mut rng = seed::rng(seed, &format!("sample.{}", kernel.id));
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, kernel.space_size as usize, n).into_vec();
    idx.sort_unstable();
    idx.iter()
        .map(|&i| {
            let design = kernel.design_by_index(i as u64);
            let outcome = oracle_evaluate(kernel, &design);
            let perf = crate::cdfg::normalize_latency(outcome.latency)?;
            let util = outcome.util.map(|u| u.clamp(0.0, 1.0));
            Ok(Sample {
                design,
                label: Label::new(perf, util)?,
                valid: outcome.valid,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdfg::normalize_latency;

    fn small_suite() -> Suite {
        generate_suite(7, 4, 2, false).unwrap()
    }

    #[test]
    fn suite_generation_is_deterministic() {
        let a = generate_suite(7, 4, 2, false).unwrap();
        let b = generate_suite(7, 4, 2, false).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_suite(8, 4, 2, false).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(generate_suite(1, 1, 1, false).is_err());
        assert!(generate_suite(1, 2, 0, false).is_err());
        let s = generate_suite(1, 2, 0, true).unwrap();
        assert_eq!(s.targets().count(), 0);
        assert_eq!(s.sources().count(), 2);
    }

    #[test]
    fn spaces_within_bounds() {
        let s = small_suite();
        for k in &s.kernels {
            assert!(
                (SPACE_MIN..=SPACE_MAX).contains(&k.space_size),
                "kernel {} space {}",
                k.id,
                k.space_size
            );
            assert_eq!(k.space_size, k.graph.design_space_size());
        }
    }

    #[test]
    fn targets_share_and_differ() {
        let s = small_suite();
        for t in s.targets() {
            let parent = s.kernel(t.parent_source.as_ref().unwrap()).unwrap();
            let shared: Vec<u32> = t
                .template
                .motif_ids
                .iter()
                .copied()
                .filter(|m| parent.template.motif_ids.contains(m))
                .collect();
            assert!(!shared.is_empty(), "target {} shares no motif with {}", t.id, parent.id);
            let differs_in_motif = t.template.motif_ids != parent.template.motif_ids;
            let differs_in_level = t
                .template
                .levels
                .iter()
                .zip(&parent.template.levels)
                .any(|(a, b)| a.trip_count != b.trip_count)
                || t.template.levels.len() != parent.template.levels.len();
            assert!(differs_in_motif || differs_in_level);
            assert!(!t.template.shared_motif_ids.is_empty());
        }
    }

    #[test]
    fn default_design_is_feasible() {
        let s = small_suite();
        for k in &s.kernels {
            let o = oracle_evaluate(k, &k.default_design());
            assert!(o.valid, "default design invalid for {}", k.id);
            for u in o.util {
                assert!(u < 0.2, "default util {u} too high for {}", k.id);
            }
        }
    }

    #[test]
    fn oracle_rejects_non_dividing_parallel() {
        let s = small_suite();
        let k = s
            .kernels
            .iter()
            .find(|k| {
                k.template
                    .levels
                    .iter()
                    .any(|l| l.parallel_values.iter().any(|&p| l.trip_count % p != 0))
            })
            .expect("some kernel has a non-dividing parallel value");
        let lvl = k
            .template
            .levels
            .iter()
            .position(|l| l.parallel_values.iter().any(|&p| l.trip_count % p != 0))
            .unwrap();
        let bad = *k.template.levels[lvl]
            .parallel_values
            .iter()
            .find(|&&p| k.template.levels[lvl].trip_count % p != 0)
            .unwrap();
        let mut design = k.default_design();
        let si = k
            .graph
            .pragma_slots
            .iter()
            .position(|s| s.kind == PragmaKind::Parallel && s.target_block == lvl as u32)
            .unwrap();
        design.values[si] = PragmaValue::Int(bad);
        assert!(!oracle_evaluate(k, &design).valid);
    }

    #[test]
    fn parallel_beyond_trip_count_is_invalid() {
        // hand-built slot with a legal value larger than the trip count
        let s = small_suite();
        let mut k = s.kernels[0].clone();
        let trip = k.template.levels[0].trip_count;
        let big = trip * 2;
        let si = k
            .graph
            .pragma_slots
            .iter()
            .position(|sl| sl.kind == PragmaKind::Parallel && sl.target_block == 0)
            .unwrap();
        k.graph.pragma_slots[si].legal_values.push(PragmaValue::Int(big));
        let mut design = k.default_design();
        design.values[si] = PragmaValue::Int(big);
        assert!(!oracle_evaluate(&k, &design).valid);
    }

    #[test]
    fn oracle_latency_monotone_in_parallel() {
        let s = small_suite();
        for k in &s.kernels {
            let limit = k.space_size.min(400);
            for design in k.graph.enumerate_designs(limit) {
                for (si, slot) in k.graph.pragma_slots.iter().enumerate() {
                    if slot.kind != PragmaKind::Parallel {
                        continue;
                    }
                    let PragmaValue::Int(p) = design.values[si] else { continue };
                    if !slot.legal_values.contains(&PragmaValue::Int(2 * p)) {
                        continue;
                    }
                    let mut doubled = design.clone();
                    doubled.values[si] = PragmaValue::Int(2 * p);
                    let a = oracle_evaluate(k, &design);
                    let b = oracle_evaluate(k, &doubled);
                    if a.valid && b.valid {
                        assert!(
                            b.latency <= a.latency + 1e-9,
                            "latency rose with parallel {p}->{} on {}",
                            2 * p,
                            k.id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn utilization_monotone_in_parallel() {
        let s = small_suite();
        let k = &s.kernels[0];
        for design in k.graph.enumerate_designs(k.space_size.min(200)) {
            for (si, slot) in k.graph.pragma_slots.iter().enumerate() {
                if slot.kind != PragmaKind::Parallel {
                    continue;
                }
                let PragmaValue::Int(p) = design.values[si] else { continue };
                if !slot.legal_values.contains(&PragmaValue::Int(2 * p)) {
                    continue;
                }
                let mut doubled = design.clone();
                doubled.values[si] = PragmaValue::Int(2 * p);
                let a = oracle_evaluate(k, &design);
                let b = oracle_evaluate(k, &doubled);
                for r in 0..4 {
                    assert!(b.util[r] >= a.util[r] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn brute_force_minimum_is_reproducible() {
        let s = small_suite();
        let k = s
            .kernels
            .iter()
            .filter(|k| k.space_size <= 10_000)
            .max_by_key(|k| k.space_size)
            .expect("a kernel with a small space");
        let mut best: Option<(f64, PragmaDesign)> = None;
        let mut count = 0u64;
        for d in k.graph.enumerate_designs(u64::MAX) {
            let o = oracle_evaluate(k, &d);
            count += 1;
            if o.valid {
                match &best {
                    Some((lat, _)) if *lat <= o.latency => {}
                    _ => best = Some((o.latency, d)),
                }
            }
        }
        assert_eq!(count, k.space_size);
        let (best_lat, best_design) = best.expect("some valid design");
        assert_eq!(oracle_evaluate(k, &best_design).latency, best_lat);
        // the default design never beats the optimum
        assert!(oracle_evaluate(k, &k.default_design()).latency >= best_lat);
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let s = small_suite();
        let k = &s.kernels[0];
        let a = sample_dataset(k, 50, 3).unwrap();
        let b = sample_dataset(k, 50, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(sample_dataset(k, k.space_size as usize + 1, 3).is_err());
        for sample in &a {
            let o = oracle_evaluate(k, &sample.design);
            let perf = normalize_latency(o.latency).unwrap();
            assert_eq!(perf, sample.label.perf);
            let lat_back = crate::cdfg::denormalize_perf(perf);
            assert!((lat_back - o.latency).abs() / o.latency < 1e-12);
        }
        let small = s.kernels.iter().min_by_key(|k| k.space_size).unwrap();
        let all = sample_dataset(small, small.space_size as usize, 1).unwrap();
        assert_eq!(all.len(), small.space_size as usize);
    }

    #[test]
    fn validity_rate_is_learnable_but_nontrivial() {
        let s = generate_suite(11, 6, 2, false).unwrap();
        let mut valid = 0usize;
        let mut total = 0usize;
        for k in &s.kernels {
            let samples = sample_dataset(k, (k.space_size as usize).min(400), 5).unwrap();
            valid += samples.iter().filter(|x| x.valid).count();
            total += samples.len();
        }
        let rate = valid as f64 / total as f64;
        assert!((0.35..=0.75).contains(&rate), "aggregate validity rate {rate}");
    }

    #[test]
    fn kernels_exhibit_domain_shift() {
        let s = generate_suite(3, 6, 2, false).unwrap();
        let means: Vec<f64> = s
            .kernels
            .iter()
            .map(|k| {
                let samples = sample_dataset(k, (k.space_size as usize).min(300), 9).unwrap();
                samples.iter().map(|x| x.label.perf).sum::<f64>() / samples.len() as f64
            })
            .collect();
        let mut ok = 0;
        let mut pairs = 0;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                pairs += 1;
                if (means[i] - means[j]).abs() > 0.1 {
                    ok += 1;
                }
            }
        }
        assert!(
            ok as f64 >= 0.8 * pairs as f64,
            "only {ok}/{pairs} kernel pairs show a mean-perf gap > 0.1"
        );
    }

    #[test]
    fn graph_shapes_are_reasonable() {
        let s = small_suite();
        for k in &s.kernels {
            let n = k.graph.n_nodes();
            assert!((10..=80).contains(&n), "kernel {} has {n} nodes", k.id);
            assert!(k.graph.has_pseudo_nodes());
            for l in &k.template.levels {
                assert!(k
                    .graph
                    .pragma_slots
                    .iter()
                    .any(|s| s.kind == PragmaKind::Parallel && s.target_block == l.header_block));
            }
        }
    }
}
