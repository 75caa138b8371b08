//! Dense tensors with a reverse-mode tape, the layer primitives the model
//! is built from, and the Adam optimiser.

mod adam;
mod graph;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod nn;
mod params;
mod tensor;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use params::{
    glorot, ParamFile, ParamId, ParamRecord, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use tensor::Tensor;
