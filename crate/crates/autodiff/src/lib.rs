//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! The op set is deliberately fixed to what a patch transformer needs:
//! matmul, bias/row broadcasts, scaling, transpose, softmax, layer norm,
//! GELU, embedding lookup, row concat/slice and a masked MSE loss. Every
//! backward rule is checked against central finite differences in the test
//! suite (see [`gradcheck`]).

mod error;
pub mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
