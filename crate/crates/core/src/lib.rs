//! Deterministic federated-learning testbench with latent-space resampling.
//!
//! A global convolutional autoencoder with a classifier head is trained
//! across simulated non-IID clients with FedAvg. Each client is then
//! personalized on its own data augmented by synthetic rows: latent codes are
//! rebalanced with an oversampling or hybrid sampler and decoded back to
//! feature space. Evaluation runs stratified K-fold cross-validation with a
//! checkpoint reset between sampler trials so every sampler starts from the
//! same global model.
//!
//! Every random draw comes from a stream derived from one master seed, so a
//! run is reproducible bit for bit regardless of thread count.

// `!(x > 0.0)` rejects NaN alongside non-positive values; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod crossval;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod gcae;
pub mod metrics;
pub mod par;
pub mod resampling;
pub mod rng;

pub use error::{CheckpointError, Error, Result};
