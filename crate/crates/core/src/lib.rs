//! Variational autoencoders for tabular data with missing values.
//!
//! Models see a partially observed row `x` together with an observation
//! mask (1 = observed). Training maximizes a partial ELBO, optionally with a
//! consistency penalty that compares the posterior given the observed set
//! `Q` with the posterior given a random subset `P ⊆ Q`.

pub mod acquisition;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod flows;
pub mod missingness;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
