//! Reverse-mode differentiation over scalar computation graphs.

mod params;
mod tape;

pub use params::{Block, ParameterVector};
pub(crate) use params::{default_layout, validate_layout};
pub use tape::{hessian_of, value_and_grad, Op, Tape, Var, DENSE_HESSIAN_CAP};
