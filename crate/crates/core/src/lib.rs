//! Federated training of small unconditional diffusion models across
//! simulated non-IID clients, with data-sharing and
//! personalization-plus-filtering strategies and a sample-quality metric
//! suite.

pub mod denoiser;
pub mod diffusion;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
