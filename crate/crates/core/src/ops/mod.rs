//! Differentiable operations recorded on a [`Graph`](crate::autograd::Graph).

mod basic;
pub mod conv;
mod norm;
mod upsample;

pub use basic::{sigmoid, softmax_forward};
pub use conv::ConvSpec;
pub use norm::LAYER_NORM_EPS;
