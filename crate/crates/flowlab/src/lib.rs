//! flowlab: a desk-scale laboratory for rectified-flow generative modeling.
//!
//! The crate trains small velocity-field networks between synthetic
//! distributions, samples them by ODE integration with an optional
//! posterior-mean (Tweedie) drift correction, distills multi-step samplers
//! into one-step maps, and runs a two-stage fine-tuning scheme (EWC-gated
//! pretraining, then low-rank-adapter fine-tuning with consistency losses)
//! on procedurally generated conditional images. An evaluation harness
//! measures transport quality with two-sample metrics and reproduces the
//! ablation axes as committed-seed experiments.
//!
//! Start with the runnable examples (`cargo run --release --example
//! train_flow`) or the `flowlab` CLI in the sibling crate.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod net;
pub mod opt;
pub mod checkpoint;
pub mod dist;
pub mod exports;
pub mod flow;
pub mod tweedie;
pub mod metrics;
pub mod phantom;
pub mod adapt;
pub mod distill;
pub mod harness;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
