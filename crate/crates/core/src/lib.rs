//! Desk-scale simulator and library for personalized federated learning with
//! heterogeneous client models.
//!
//! The pieces, bottom up:
//!
//! - [`linalg`]: deterministic dense kernels (SVD, pseudo-inverse, CCA, CKA).
//! - [`model`]: frozen feed-forward backbones with exact forward/backward.
//! - [`adapter`]: conventional LoRA and dimension-invariant PQ-LoRA.
//! - [`align`]: one-shot pre-federation weight alignment across model types.
//! - [`client`]: streaming clients with episodic memory and gradient probes.
//! - [`server`]: relevance-guided and equal-weight adapter aggregation.
//! - [`bench`]: synthetic scenario generator, run loop, metrics.
//! - [`checks`]: self-contained property suites behind the `check` command.

pub mod adapter;
pub mod align;
pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod client;
pub mod error;
pub mod linalg;
pub mod model;
pub mod par;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
