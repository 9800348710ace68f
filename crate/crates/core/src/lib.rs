//! Ex ante hardware constraint estimation and cloud instance selection.
//!
//! A submitted job (executable or script, invocation command, environment,
//! optional source trees and evidence files) flows through:
//!
//! 1. [`submission`]: normalization into a [`submission::JobSpec`].
//! 2. [`agent`]: a two-stage reason/act/observe harness. Stage one runs the
//!    [`analysis`] tool suite and job-history lookup ([`similarity`]) to
//!    produce a [`constraints::ConstraintBundle`]; stage two maps that bundle
//!    onto the [`catalog`] through the [`selector`].
//! 3. [`executor`]: simulated provisioning with ranked fallback recovery.
//! 4. [`records`]: durable job records that feed future estimates.
//!
//! Numeric kernels that do not need a fixed precision are generic over
//! [`Scalar`]; the aliases below pin the concrete types used by the pipeline.

pub mod agent;
pub mod analysis;
pub mod catalog;
pub mod constraints;
pub mod executor;
pub mod num;
pub mod records;
pub mod selector;
pub mod similarity;
pub mod submission;
pub mod testkit;

pub use num::Scalar;

/// Floating point type used for gigabytes, prices and scores throughout the pipeline.
pub type Real = f64;

/// Normalized WL similarity between two evidence graphs, in `[0, 1]`.
pub type Similarity = f64;

/// Gram matrix of normalized WL similarities at pipeline precision.
pub type SimilarityMatrix = similarity::GramMatrix<f64>;

/// Single precision Gram matrix, for large history sweeps.
pub type SimilarityMatrix32 = similarity::GramMatrix<f32>;

/// Exact calculator result (arbitrary precision rational plus unit).
pub type ExactQuantity = analysis::calculator::Quantity;
