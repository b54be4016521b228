//! Online evaluation: surrogate-guided design-space search.
//!
//! Designs are enumerated depth-first in slot order (values ascending) up
//! to the budget, filtered by the validity classifier and the 80% resource
//! constraint on predicted utilization, ranked by predicted performance,
//! and the top-k are scored against the oracle. The best design known from
//! the fine-tune set always participates in the final argmin, so reported
//! speedups never fall below 1.

use crate::cdfg::{denormalize_perf, PragmaDesign};
use crate::error::{Error, Result};
use crate::model::EncodedGraph;
use crate::synthgen::{oracle_evaluate, Kernel, OracleOutcome};
use crate::train::AnyModel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Resource-utilization ceiling applied during candidate filtering.
pub const RESOURCE_CAP: f64 = 0.8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_designs: u64,
    pub top_k: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget { max_designs: 75_000, top_k: 10 }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.top_k as u64 > self.max_designs {
            return Err(Error::config(format!(
                "top_k {} exceeds the design budget {}",
                self.top_k, self.max_designs
            )));
        }
        Ok(())
    }
}

/// Five-target prediction plus a validity verdict for one design.
pub type Prediction = ([f64; 5], bool);

/// Anything that can predict (perf, util, validity) for a batch of designs.
/// The genuine predictor pairs a fine-tuned regression model with a
/// fine-tuned classifier; the oracle-backed variant is the
/// perfect-surrogate control. Implementations must be safe to call from
/// worker threads over disjoint design slices.
pub trait Predictor: Sync {
    fn predict(&self, kernel: &Kernel, designs: &[PragmaDesign]) -> Result<Vec<Prediction>>;
}

/// Worker-thread cap: `HIERMOE_THREADS` when set to a positive integer,
/// otherwise the machine's available parallelism.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("HIERMOE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n.min(64);
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

pub struct ModelPredictor<'a> {
    pub regression: &'a AnyModel,
    pub classifier: &'a AnyModel,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, kernel: &Kernel, designs: &[PragmaDesign]) -> Result<Vec<Prediction>> {
        let graphs: Vec<EncodedGraph> = designs
            .iter()
            .map(|d| EncodedGraph::new(&kernel.graph, d))
            .collect::<Result<_>>()?;
        let refs: Vec<&EncodedGraph> = graphs.iter().collect();
        let preds = self.regression.predict_encoded(&refs)?;
        let valid = self.classifier.classify_encoded(&refs)?;
        Ok(preds
            .into_iter()
            .zip(valid)
            .map(|(p, v)| {
                let mut t = [0.0; 5];
                t.copy_from_slice(&p[..5]);
                (t, v)
            })
            .collect())
    }
}

/// Perfect-surrogate control: the oracle itself answers every query.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, kernel: &Kernel, designs: &[PragmaDesign]) -> Result<Vec<Prediction>> {
        designs
            .iter()
            .map(|d| {
                let o = oracle_evaluate(kernel, d);
                let perf = crate::cdfg::normalize_latency(o.latency)?;
                Ok(([perf, o.util[0], o.util[1], o.util[2], o.util[3]], o.valid))
            })
            .collect()
    }
}

/// Best labeled design available before searching (from the fine-tune set).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnownBest {
    pub design: BTreeMap<String, crate::cdfg::PragmaValue>,
    pub latency: f64,
}

/// One oracle-scored top-k pick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopPick {
    pub design: BTreeMap<String, crate::cdfg::PragmaValue>,
    pub predicted_perf: f64,
    pub predicted_util: [f64; 4],
    pub oracle_valid: bool,
    pub oracle_latency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DseResult {
    pub kernel_id: String,
    pub space_size: u64,
    pub enumerated: u64,
    pub predicted_valid: u64,
    pub within_resource_cap: u64,
    pub top: Vec<TopPick>,
    pub best_design: BTreeMap<String, crate::cdfg::PragmaValue>,
    pub best_latency: f64,
    /// True when the fine-tune-set best won the final argmin.
    pub best_from_dataset: bool,
    pub reference_latency: f64,
    pub speedup: f64,
    pub fallback: bool,
}

/// `reference_latency / best_latency`; both must be positive.
pub fn speedup(best_latency: f64, reference_latency: f64) -> Result<f64> {
    if !(best_latency > 0.0) || !(reference_latency > 0.0) {
        return Err(Error::data(format!(
            "speedup needs positive latencies, got best={best_latency}, reference={reference_latency}"
        )));
    }
    Ok(reference_latency / best_latency)
}

/// Arithmetic and geometric mean over per-kernel speedups.
pub fn aggregate(speedups: &[f64]) -> Result<(f64, f64)> {
    if speedups.is_empty() {
        return Err(Error::data("aggregate over zero kernels"));
    }
    let n = speedups.len() as f64;
    let arith = speedups.iter().sum::<f64>() / n;
    let geo = (speedups.iter().map(|s| s.ln()).sum::<f64>() / n).exp();
    Ok((arith, geo))
}

/// Predicts a design list, fanning out over contiguous slices when more
/// than one worker thread is available. Slice results are concatenated in
/// slice order, so the outcome is independent of the thread count.
fn predict_all(
    kernel: &Kernel,
    predictor: &dyn Predictor,
    designs: &[PragmaDesign],
) -> Result<Vec<Prediction>> {
    let threads = worker_threads().min(designs.len().max(1));
    if threads <= 1 || designs.len() < 256 {
        return predictor.predict(kernel, designs);
    }
    let chunk = designs.len().div_ceil(threads);
    let slices: Vec<&[PragmaDesign]> = designs.chunks(chunk).collect();
    let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = slices
            .into_iter()
            .map(|slice| scope.spawn(move || predictor.predict(kernel, slice)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(designs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Surrogate-guided search over one kernel's design space.
pub fn search(
    kernel: &Kernel,
    predictor: &dyn Predictor,
    budget: &SearchBudget,
    known_best: &KnownBest,
) -> Result<DseResult> {
    budget.validate()?;
    let slots = &kernel.graph.pragma_slots;

    struct Candidate {
        design: PragmaDesign,
        perf: f64,
        util: [f64; 4],
    }
    let designs: Vec<PragmaDesign> = kernel.graph.enumerate_designs(budget.max_designs).collect();
    let enumerated = designs.len() as u64;
    let preds = predict_all(kernel, predictor, &designs)?;

    let mut survivors: Vec<Candidate> = Vec::new();
    let mut predicted_valid = 0u64;
    let mut within_cap = 0u64;
    for (design, (t, valid)) in designs.into_iter().zip(preds) {
        if !valid {
            continue;
        }
        predicted_valid += 1;
        let util = [t[1], t[2], t[3], t[4]];
        if util.iter().any(|&u| u > RESOURCE_CAP) {
            continue;
        }
        within_cap += 1;
        survivors.push(Candidate { design, perf: t[0], util });
    }

    // highest predicted performance first; ties broken lexicographically
    survivors.sort_by(|a, b| b.perf.total_cmp(&a.perf).then_with(|| a.design.cmp(&b.design)));
    survivors.truncate(budget.top_k);

    let fallback = survivors.is_empty();
    let top: Vec<TopPick> = survivors
        .iter()
        .map(|c| {
            let o: OracleOutcome = oracle_evaluate(kernel, &c.design);
            TopPick {
                design: c.design.to_map(slots),
                predicted_perf: c.perf,
                predicted_util: c.util,
                oracle_valid: o.valid,
                oracle_latency: o.latency,
            }
        })
        .collect();

    // best = lowest oracle latency among oracle-valid picks and the known best
    let mut best_latency = known_best.latency;
    let mut best_design = known_best.design.clone();
    let mut best_from_dataset = true;
    for pick in &top {
        if pick.oracle_valid && pick.oracle_latency < best_latency {
            best_latency = pick.oracle_latency;
            best_design = pick.design.clone();
            best_from_dataset = false;
        }
    }

    Ok(DseResult {
        kernel_id: kernel.id.clone(),
        space_size: kernel.space_size,
        enumerated,
        predicted_valid,
        within_resource_cap: within_cap,
        top,
        best_design,
        best_latency,
        best_from_dataset,
        reference_latency: known_best.latency,
        speedup: speedup(best_latency, known_best.latency)?,
        fallback,
    })
}

/// Brute-force optimum over the whole space under the oracle's validity
/// and the resource cap; the control for the perfect-surrogate check.
pub fn brute_force_best(kernel: &Kernel) -> Option<(PragmaDesign, f64)> {
    let mut best: Option<(PragmaDesign, f64)> = None;
    for design in kernel.graph.enumerate_designs(u64::MAX) {
        let o = oracle_evaluate(kernel, &design);
        if !o.valid || o.util.iter().any(|&u| u > RESOURCE_CAP) {
            continue;
        }
        match &best {
            Some((_, lat)) if *lat <= o.latency => {}
            _ => best = Some((design, o.latency)),
        }
    }
    best
}

/// A reference design for testing and reports: the latency the default
/// (pragma-free) design achieves.
pub fn default_design_latency(kernel: &Kernel) -> f64 {
    oracle_evaluate(kernel, &kernel.default_design()).latency
}

/// `perf` back to cycles, for report readability.
pub fn perf_to_latency(perf: f64) -> f64 {
    denormalize_perf(perf)
}
