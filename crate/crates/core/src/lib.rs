//! Simulator for graph-aggregated hybrid/vertical federated learning.
//!
//! Clients train local networks on partial feature views, a privacy score
//! picks each client's feature-extractor depth, and a server-side graph
//! convolutional network aggregates client embeddings over a graph whose
//! edges mark shared features. Server training sees only cluster centroids
//! built from sample ids and labels.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod clustering;
pub mod data;
pub mod error;
pub mod graph;
pub mod numcore;
pub mod pipeline;
pub mod privacy;
pub mod rng;
pub mod scalar;
pub mod servergcn;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = numcore::Matrix<f32>;
pub type Matrix64 = numcore::Matrix<f64>;
pub type Mlp32 = numcore::Mlp<f32>;
pub type Mlp64 = numcore::Mlp<f64>;
pub type ClientModel32 = client::ClientModel<f32>;
pub type ClientModel64 = client::ClientModel<f64>;
pub type GcnModel32 = servergcn::GcnModel<f32>;
pub type GcnModel64 = servergcn::GcnModel<f64>;
