#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod accountant;
pub mod data;
pub mod error;
pub mod grad_sample;
pub mod nn;
pub mod optimizer;
pub mod rng;
pub mod tensor;
pub mod validator;
pub mod zoo;

pub use error::{DpError, Result};
pub use rng::{RngKind, RngStream};
pub use tensor::{Scalar, Tensor};
