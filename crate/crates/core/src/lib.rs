//! Spatial-channel state space blocks for few-shot classification on a CPU.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod csm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod ledger;
pub mod model;
pub mod ops;
pub mod params;
pub mod probe;
pub mod sfm;
pub mod ssm;
pub mod svg;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Result, ScsmError};
pub use tensor::Tensor;
