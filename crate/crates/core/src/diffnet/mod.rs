//! Differentiable function approximators on a small reverse-mode tape.

mod adam;
mod field;
mod graph;
mod nets;
mod params;
mod tensor;

pub use adam::Adam;
pub use field::{eval_scalar, grad_params, grad_scalar, hvp_scalar, FieldArch, ScalarField};
pub use graph::{Graph, Var};
pub(crate) use graph::{softplus, transpose_perm};
pub use nets::{apply_dense, dense_layer, glorot, Activation, Mlp, Tcn};
pub use params::{param_grads, Bound, ParamVector, Slot, SlotId};
pub use tensor::Tensor;
