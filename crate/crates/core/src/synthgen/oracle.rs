//! Analytic latency/resource/validity oracle.
//!
//! Stands in for an HLS toolchain: a pure deterministic function from
//! (kernel, pragma design) to latency in cycles, four resource-utilization
//! fractions, and a validity bit. The cost model is project-owned and
//! documented in `suite.json`; it is built to preserve the structure of the
//! learning problem (efficiency knees, saturation, divisibility validity,
//! resource frontiers), not to match any real tool's numbers.

use crate::cdfg::{PipeMode, PragmaDesign, PragmaKind, PragmaValue};
use crate::synthgen::{Kernel, MotifCost};
use serde::{Deserialize, Serialize};

/// Per-kernel oracle coefficients. All strictly positive; resource
/// capacities are normalized to 1.0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleParams {
    /// Base latency / resource coefficients per motif id used by the kernel.
    pub motif_costs: Vec<(u32, MotifCost)>,
    /// Loop overhead cycles per level (outermost first).
    pub level_overhead: Vec<f64>,
    /// Parallelization efficiency knee per level: speedup saturates at
    /// `min(parallel, knee)`.
    pub knees: Vec<u32>,
    /// Latency multiplier applied by a flattened pipeline (< 1).
    pub flatten_factor: f64,
    /// Initiation-interval ratio for coarse pipelining (< 1).
    pub coarse_ii_ratio: f64,
    /// Kernel-level latency scale (sets the kernel's mean performance).
    pub latency_scale: f64,
    /// Baseline utilization per resource [lut, ff, dsp, bram].
    pub res_base: [f64; 4],
    /// Utilization per op-weighted parallel hardware copy.
    pub res_unit: [f64; 4],
    /// Utilization per enabled pipeline (flatten weighs 1.6x).
    pub res_pipe: [f64; 4],
    /// Utilization per tile unit (tile factor minus one, summed).
    pub res_tile: [f64; 4],
    /// Strength of the tiling memory-latency improvement.
    pub mem_tile_mu: f64,
}

/// Oracle verdict for one design. `latency` is reported even for invalid
/// designs (generator bookkeeping); `util` components may exceed 1.0 when
/// the design overflows a resource.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub valid: bool,
    pub latency: f64,
    pub util: [f64; 4],
}

/// Per-level slot choices decoded from a design.
#[derive(Debug, Clone)]
pub struct DecodedDesign {
    pub parallel: Vec<u32>,
    pub pipeline: Vec<PipeMode>,
    pub tiling: Vec<u32>,
}

/// Maps the positional design onto per-level (parallel, pipeline, tiling)
/// choices using the kernel's slot list. Missing slots default to
/// (1, Off, 1).
pub fn decode_design(kernel: &Kernel, design: &PragmaDesign) -> DecodedDesign {
    let levels = kernel.template.levels.len();
    let mut out = DecodedDesign {
        parallel: vec![1; levels],
        pipeline: vec![PipeMode::Off; levels],
        tiling: vec![1; levels],
    };
    for (slot, value) in kernel.graph.pragma_slots.iter().zip(&design.values) {
        let level = kernel
            .template
            .levels
            .iter()
            .position(|l| l.header_block == slot.target_block)
            .expect("slot targets a loop header block");
        match (slot.kind, value) {
            (PragmaKind::Parallel, PragmaValue::Int(v)) => out.parallel[level] = *v,
            (PragmaKind::Tiling, PragmaValue::Int(v)) => out.tiling[level] = *v,
            (PragmaKind::Pipeline, PragmaValue::Pipe(m)) => out.pipeline[level] = *m,
            _ => unreachable!("design validated against slots"),
        }
    }
    out
}

/// Evaluates one design. Pure and deterministic.
pub fn oracle_evaluate(kernel: &Kernel, design: &PragmaDesign) -> OracleOutcome {
    let p = &kernel.oracle;
    let d = decode_design(kernel, design);
    let levels = &kernel.template.levels;

    // body latency per innermost iteration; tiling improves the memory part
    let tile_total: f64 = d.tiling.iter().map(|&t| t as f64).product();
    let mem_factor = 1.0 / (1.0 + p.mem_tile_mu * tile_total.log2());
    let mut lat: f64 = p
        .motif_costs
        .iter()
        .map(|(_, c)| c.lat_comp + c.lat_mem * mem_factor)
        .sum::<f64>()
        .max(1.0);

    // levels from innermost to outermost
    for (idx, level) in levels.iter().enumerate().rev() {
        let eff = d.parallel[idx].min(p.knees[idx]).max(1) as f64;
        let iters = (level.trip_count as f64 / eff).ceil();
        let per = lat + p.level_overhead[idx];
        lat = match d.pipeline[idx] {
            PipeMode::Off => iters * per,
            PipeMode::Coarse => {
                let ii = (p.coarse_ii_ratio * per).round().max(1.0);
                (iters - 1.0) * ii + per
            }
            PipeMode::Flatten => p.flatten_factor * iters * per,
        };
    }
    let latency = lat * p.latency_scale;

    // resources scale with total parallel hardware copies
    let copies: f64 = d.parallel.iter().map(|&v| v as f64).product();
    let mults: f64 = p.motif_costs.iter().map(|(_, c)| c.mults as f64).sum();
    let mem_ops: f64 = p.motif_costs.iter().map(|(_, c)| c.mem_ops as f64).sum();
    let others: f64 = p.motif_costs.iter().map(|(_, c)| c.other_ops as f64).sum();
    let pipe_score: f64 = d
        .pipeline
        .iter()
        .map(|m| match m {
            PipeMode::Off => 0.0,
            PipeMode::Coarse => 1.0,
            PipeMode::Flatten => 1.6,
        })
        .sum();
    let tile_units: f64 = d.tiling.iter().map(|&t| (t - 1) as f64).sum();

    let op_weight = [
        others + mem_ops,  // lut
        others + mults,    // ff
        mults.max(0.25),   // dsp
        mem_ops.max(0.25), // bram
    ];
    let mut util = [0.0; 4];
    for r in 0..4 {
        util[r] = p.res_base[r]
            + p.res_unit[r] * op_weight[r] * copies
            + p.res_pipe[r] * pipe_score
            + p.res_tile[r] * tile_units;
    }

    let divisible = levels
        .iter()
        .zip(&d.parallel)
        .all(|(l, &pv)| pv >= 1 && l.trip_count % pv == 0);
    let within_capacity = util.iter().all(|&u| u <= 1.0);

    OracleOutcome {
        valid: divisible && within_capacity,
        latency,
        util,
    }
}
