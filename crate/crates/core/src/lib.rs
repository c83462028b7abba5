//! Camera-only 3D semantic occupancy: lift-splat view transform, dual-branch
//! voxel/BEV encoder, prototype-query decoder and the training stack around
//! them, on a small self-contained tensor engine.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gemm;
pub mod latency;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod ops;
pub mod scene;
pub mod tensor;
pub mod view;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use ops::ConvSpec;
pub use tensor::{Real, Tensor};
