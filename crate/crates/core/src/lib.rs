//! Latent generative modeling of spatial systems with traceable entities.
//!
//! Entities receive unique identifiers from a fixed pool. A cross-attention
//! encoder compresses each frame into a fixed number of latent tokens, a
//! decoder queried by identifier embeddings reads entities back out, and a
//! flow model over latent trajectories forecasts future frames.

pub mod approximator;
pub mod config;
pub mod ema;
pub mod error;
pub mod evaluation;
pub mod first_stage;
pub mod identifiers;
pub mod interpolants;
pub mod nbody;
pub mod nn;
pub mod repro;
pub mod sampler;
pub mod types;

pub use error::{Error, Result};
