//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Graphs are built explicitly: every builder call appends an op record, so
//! node order is already topological. Evaluation and gradient accumulation
//! walk that order deterministically; repeated runs are bit-identical.
//!
//! Hot paths elsewhere in the crate (the volume renderer and upsampler) use
//! hand-written forward/gradient code instead of this graph; those paths are
//! validated against the same finite-difference suite as the graph ops.

mod adam;
mod checkpoint;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_tensors, save_tensors};
pub use graph::{backward, backward_seeded, forward, Evaluation, Graph, NodeId, Op};
pub use tensor::{NamedTensors, Tensor};
