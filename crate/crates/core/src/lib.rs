//! Hierarchically clustered representation learning.
//!
//! A variational autoencoder whose latent prior is a hierarchical Gaussian
//! mixture organised by a nested stick-breaking (nCRP) tree. Every node of
//! the tree, internal or leaf, is a Gaussian component; an instance picks a
//! root-to-leaf path and a level on that path, and the selected component
//! generates its embedding. The tree is refined during training with GROW,
//! PRUNE and MERGE operations.
//!
//! Module map:
//!
//! - [`special`]: digamma, trigamma, log-gamma, log-sum-exp.
//! - [`nn`]: dense networks with manual backprop, Adam, finite differences.
//! - [`hierarchy`]: the tree, stick-breaking weights, structure operations,
//!   JSON/DOT serialization.
//! - [`variational`]: closed-form variational updates and ELBO terms.
//! - [`model`]: HCRL1 / HCRL2 / VaDE / VAE models, E-step, training loop,
//!   checkpoints and gradient checking.
//! - [`data`]: IDX and CSV loaders, synthetic hierarchical data.
//! - [`metrics`]: NLL, reconstruction error, hierarchical F-score, exports.
//! - [`baseline`]: recursive k-means for the flat-embedding pipeline.
//! - [`cli`]: the subcommands behind the `hcrl` binary.

pub mod baseline;
pub mod cli;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod special;
pub mod variational;

pub use error::{Error, Result};
