//! Dense f32 tensors, a reverse-mode compute graph over a small primitive
//! set, and the optimizers used to train against it.

mod format;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub(crate) use format::{read_tensor_record, Cursor};
pub use format::{
    decode_tensor, encode_tensor, load_tensor, save_tensor, write_tensor, TENSOR_MAGIC,
    TENSOR_VERSION,
};
pub use graph::{Bindings, Graph, NodeId, Padding};
pub use optim::{adam_step, sgd_step, AdamState};
pub use params::{ParamEntry, ParamTable};
pub use tensor::{NamedTensors, Tensor};

use crate::error::Result;

/// Evaluates `graph` with the given leaf bindings and returns its output.
pub fn forward_eval(graph: &mut Graph, bindings: &[&dyn Bindings]) -> Result<Tensor> {
    graph.forward(bindings).cloned()
}

/// Gradients of the scalar output with respect to every `param` leaf.
pub fn backward(graph: &Graph) -> Result<NamedTensors> {
    graph.backward()
}
