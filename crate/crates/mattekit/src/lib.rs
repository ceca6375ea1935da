//! Trimap-free image matting at desk scale.
//!
//! The pipeline covers synthetic dataset generation ([`synth`]), a two-branch
//! matting model with a shared multi-resolution encoder ([`model`]), training
//! losses ([`loss`]), matting quality metrics ([`metrics`]), and a training /
//! evaluation / ablation harness ([`train`], [`evaluate`], [`ablate`],
//! [`infer`]). All numerics are f64 on a hand-rolled reverse-mode tape
//! ([`tape`]) so gradients can be validated against finite differences.

pub mod ablate;
pub mod ckpt;
pub mod error;
pub mod evaluate;
pub mod img;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pngio;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{MatteError, Result};
