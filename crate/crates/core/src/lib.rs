// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod fock;
pub mod learn;
pub mod linalg;
pub mod reconstruct;
pub mod seed;

pub use error::{Error, Result};
