//! Layered-image toolkit: compositing and shadow-residual math, mask
//! fusion, boundary degradations, flow-objective kernels, proposal
//! selection, tool-service curation, dataset storage, and decomposition
//! metrics.
//!
//! The crate is organized around pure value types ([`image::Image`],
//! [`image::AlphaMask`], [`compose::LayeredSample`]) and pure functions over
//! them; the curation pipeline layers deterministic mock tool services and
//! HTTP clients on top so the whole system runs offline or against real
//! endpoints.

pub mod cli;
pub mod compose;
pub mod config;
pub mod curate;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod selector;
pub mod services;

pub use error::{Error, Result};
