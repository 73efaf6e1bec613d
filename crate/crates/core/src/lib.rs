#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
