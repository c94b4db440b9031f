//! Strict cold-start recommendation with frozen heterogeneous and homogeneous
//! graphs.
//!
//! The crate is organized along the pipeline:
//!
//! - [`dataset`]: interaction ingestion, k-core filtering, cold/warm splits,
//!   knowledge-graph construction and noise injection, feature files and a
//!   deterministic synthetic generator.
//! - [`graphs`]: the frozen graphs (collaborative KG, per-modality kNN item
//!   graphs, user co-occurrence graph) and the inference-time mask.
//! - [`model`]: the side-information-aware heterogeneous encoder and the
//!   modality-specific homogeneous propagation, on top of [`autograd`].
//! - [`objectives`] and [`trainer`]: the four training losses, the
//!   discriminator and the alternating optimizer.
//! - [`eval`]: all-ranking evaluation and metrics.
//! - [`experiment`]: configuration-driven commands used by the CLI.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graphs;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
