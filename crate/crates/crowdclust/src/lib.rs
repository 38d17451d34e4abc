//! Clustering items from noisy binary user feedback.
//!
//! A set of `n` items is partitioned into `K` hidden clusters. Users are shown
//! a list of `w` items together with one of `L` binary questions and answer
//! each item with `+1`/`-1`; the answer statistics depend on the item's cluster,
//! the question, and a per-item hardness parameter. This crate provides:
//!
//! - [`model`]: the generative answer model, its admissibility checks and the
//!   model constants (`h*`, `rho*`, `eta`), plus seeded answer simulation;
//! - [`divergence`]: Bernoulli KL utilities, the per-item and global divergences
//!   that govern misclassification error under uniform and adaptive (list,
//!   question) selection, their sandwich bounds, and the induced error
//!   lower-bound curves;
//! - [`uniform`]: the nonadaptive pipeline (uniform collection, profile
//!   normalization, neighborhood-seeded K-means, misclassification accounting);
//! - [`adaptive`]: the adaptive (list, question) selection loop with periodic
//!   re-clustering and parameter estimation;
//! - [`harness`]: experiment orchestration over synthetic models and replayed
//!   response logs, with CSV artifacts.
//!
//! Numeric code is generic over the scalar type through [`scalar::Real`]
//! (`f32` or `f64`); the `*64` aliases below pin the common case.

pub mod adaptive;
pub mod divergence;
pub mod harness;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod uniform;

pub use scalar::Real;

/// Errors shared across the crate's modules.
pub mod error;
pub use error::Error;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ModelReport64 = model::ModelReport<f64>;
pub type ResponseCounts64 = uniform::ResponseCounts<f64>;
pub type ClusterResult64 = uniform::ClusterResult<f64>;
pub type Allocation64 = divergence::Allocation<f64>;
pub type AdaptiveDivergence64 = divergence::AdaptiveDivergence<f64>;
