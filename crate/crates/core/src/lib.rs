//! Desk-scale lottery-ticket laboratory.
//!
//! A small dense MLP engine (ReLU, batch/layer normalization, softmax
//! cross-entropy) together with the machinery to find and study sparse
//! subnetworks:
//!
//! - [`masking`]: binary and signed masks, global magnitude pruning and the
//!   sign-transfer rules that move a mask onto a fresh initialization.
//! - [`training`]: seeded SGD with momentum, weight decay, schedules and
//!   masked updates, optionally interpolating normalization parameters with
//!   their initialization on every forward pass.
//! - [`pipelines`]: IMP, weight rewinding, learning-rate rewinding and the
//!   normalization-interpolating LRR variant (AWS).
//! - [`connectivity`]: error barriers along linear paths, linear mode
//!   connectivity verdicts and SGD-noise stability.

pub mod connectivity;
pub mod data;
pub mod engine;
pub mod error;
pub mod masking;
pub mod pipelines;
pub mod training;

pub use data::{Batch, Dataset};
pub use engine::{
    build, ForwardMode, ModelSpec, NormBuffers, NormKind, ParamVector, Phase, Role,
};
pub use error::{Error, Result};
pub use masking::{BinaryMask, PruneScope, SignedMask, TransferMode};
pub use training::{Schedule, TrainPlan};


