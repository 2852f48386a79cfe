//! Open-world deepfake-detection generalization training on synthetic
//! two-domain benchmarks.
//!
//! The crate is split along the training pipeline:
//!
//! - [`diffcore`]: reverse-mode differentiation over dense tensors.
//! - [`model`]: MLP encoder, real/fake head, adversarial domain classifier.
//! - [`ddo`]: momentum centroid tracking and the domain alignment loss.
//! - [`scbs`]: positive-pair mining and the pair-similarity loss.
//! - [`losses`]: cross-entropy, adversarial BCE, prediction regularizers, total loss.
//! - [`data`]: benchmark generation, CSV datasets, joint batch sampling.
//! - [`harness`]: pretraining, adaptation, evaluation, ablation and sweeps.
//! - [`config`]: flat key-value experiment configuration.
//! - [`selftest`]: gradient checks and closed-form oracles behind `owgds selftest`.

pub mod config;
pub mod data;
pub mod ddo;
pub mod diffcore;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod scbs;
pub mod selftest;

pub use diffcore::{Graph, GraphError, NodeId, Tensor};
