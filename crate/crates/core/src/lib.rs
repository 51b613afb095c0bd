//! Pseudo-domain discovery and domain-adaptive classification.
//!
//! A frozen feature space (`psi`) is clustered once into pseudo-domains. A
//! transformation maps each pseudo-domain centroid into the classifier's own
//! feature space, and the classifier is trained on its features concatenated
//! with the transformed centroid of the sample's pseudo-domain. Domain labels
//! are never seen by clustering, transform fitting or training; they are only
//! used to split and score experiments.
//!
//! Module map:
//! - [`store`]: datasets, the GFT1 matrix format, synthetic data, LODO splits.
//! - [`pseudo_domain`]: k-means over `psi`, cluster-count heuristic, nearest-centroid lookup.
//! - [`transform`]: the four centroid transformations and the median-heuristic bandwidth.
//! - [`classifier`]: encoder + head, training loop with the logarithmic refit schedule, inference.
//! - [`metrics`]: entropy, mutual information, NMI, accuracy, domain-predictability probe.
//! - [`harness`]: leave-one-domain-out sweeps, ablations, report emission.

pub mod classifier;
pub mod config;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod pseudo_domain;
pub mod seed;
pub mod store;
pub mod transform;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Crate version recorded in reports and model containers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
