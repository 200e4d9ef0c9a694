//! Dense tensors, a reverse-mode tape and the variational primitives built on it.

mod gradcheck;
mod params;
mod tape;
mod tensor;
pub mod variational;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamRecord, ParamStore, Parameter};
pub use tape::{sigmoid, Fault, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use variational::{kl_diag_to_standard, reparam_sample};
