#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod mask;
pub mod model;
pub mod parallel;
pub mod svg;
pub mod telemetry;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
