//! Differentiable-computation substrate: graph, layers, optimizer, schedule,
//! gradient checking and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layer;
pub mod params;
pub mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointMeta, TensorRole};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{BatchMoments, BnStats, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use layer::{Ctx, Init, LayerSpec, Mode};
pub use params::{Entry, EntryKind, ParameterSet};
pub use schedule::cosine_lr;
