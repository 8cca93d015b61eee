//! Dense tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_against, check_params, grad_check, relative_error, ParamCheck};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{conv_out_len, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::{log_add, log_sum_exp};
