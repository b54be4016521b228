//! Minimal dense-tensor reverse-mode autodiff with the layers, losses,
//! optimizer, and schedules the surrogate models need.

pub mod adam;
pub mod checkpoint;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use schedule::{untuned_warmup_steps, LrSchedule};
pub use tape::{Segments, Tape, Var};
pub use tensor::Tensor;
