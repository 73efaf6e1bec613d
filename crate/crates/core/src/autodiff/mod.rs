//! Minimal reverse-mode automatic differentiation over dense real tensors.

mod gradcheck;
mod params;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use params::ParamSet;
pub use primitive::{primitive_forward, AttrValue, Attrs, Primitive};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
