//! Dense networks, gradients, optimizer and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod history;
mod mlp;
mod params;

pub use adam::{adam_update, OptimizerState};
pub use checkpoint::{load_params, read_params, save_params, write_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference_grad, finite_difference_subset};
pub use history::{HistoryEncoderConfig, HistoryWindow};
pub use mlp::{
    mlp_backward, mlp_backward_accumulate, mlp_forward, mlp_forward_batch, mlp_predict, mlp_predict_batch, Activation,
    ForwardCache, MlpSpec,
};
pub(crate) use mlp::{backward_tensors_into, forward_tensors};
pub use params::{gradcheck_error, relative_discrepancy, ParameterSet, Tensor};

/// Hard target-network update: an independent deep copy.
pub fn copy_params(src: &ParameterSet) -> ParameterSet {
    src.clone()
}
