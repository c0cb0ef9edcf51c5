//! GAN generators built from residual blocks plus an auxiliary feature
//! branch fused by gated units, with the training loop, FID/IS metrics, and
//! dataset plumbing needed to exercise them end to end on a CPU.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gffm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{BnState, Graph, Mode, TensorD, Var};
pub use layers::{Binder, ParamId, ParamSet, Parameter};
pub use tensor::FeatureMap;
