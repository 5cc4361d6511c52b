//! Single-process federated-learning simulator built around a sign
//! supermask optimized over frozen weights.
//!
//! The server prunes the freshly initialized network once, without data, by
//! scoring unit saliency from weight magnitudes alone. Clients then train
//! only the signs of the surviving weights (through a straight-through
//! estimator) plus a private classifier head; the server aggregates the
//! uploaded sign masks with an arctanh vote. FedAvg, a binary-supermask
//! baseline, and a sign-mask-with-client-pruning baseline run under the
//! same harness for accuracy and communication-cost comparisons.

pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod mask;
pub mod nn;
pub mod prune;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
