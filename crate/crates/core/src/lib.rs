//! Surrogate models for high-level-synthesis performance prediction.
//!
//! This crate implements the full pipeline for learning to predict FPGA
//! latency and resource utilization from control-data-flow graphs annotated
//! with pragma designs, and for searching the pragma design space with the
//! learned surrogate:
//!
//! - [`cdfg`]: graph data model (nodes, blocks, pseudo nodes, pragma slots,
//!   designs, labels) and its JSON Lines serialization.
//! - [`synthgen`]: seeded generator of synthetic kernels with shared motifs
//!   and an analytic latency/resource/validity oracle.
//! - [`nn`]: dense-tensor reverse-mode autodiff, Adam, schedules, losses,
//!   and the checkpoint container.
//! - [`model`]: the five-component base GNN, the node/block/graph
//!   mixture-of-experts variants, and the two-level hierarchical model.
//! - [`train`]: pretraining, the two-stage schedule, K-means fine-tune
//!   selection, fine-tuning, and offline evaluation.
//! - [`dse`]: surrogate-guided design-space search and speedup reporting.
//! - [`gating`]: expert-assignment diagnostics.
//! - [`pipeline`]: the command implementations behind the CLI.

pub mod cdfg;
pub mod config;
pub mod dataset;
pub mod dse;
pub mod error;
pub mod gating;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synthgen;
pub mod train;

#[cfg(feature = "testutil")]
pub mod testutil;

pub use error::{Error, Result};
