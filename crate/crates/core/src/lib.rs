//! Semi-supervised segmentation trainer built around masked image modeling.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; training runs in
//! `f32` while gradient checks rerun the identical code paths in `f64`.

pub mod ablation;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod label;
pub mod masking;
pub mod netpbm;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod proto;
pub mod recon;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod tensor;

pub use label::{LabelMap, IGNORE_LABEL};
pub use tensor::{no_grad, Tensor, TensorError};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor, used by gradient checks.
pub type Tensor64 = Tensor<f64>;
