//! Counterfactual explanations for tabular classifiers using a
//! class-conditional normalizing flow.
//!
//! The pipeline: train a black-box [`classifier`], fit an affine-coupling
//! [`flow`] whose latent space is a Gaussian mixture with one component per
//! predicted class (categorical features enter through variational
//! [`dequant`]ization), then explain an instance by shifting its latent code
//! along the difference of empirical class means and inverting the flow
//! ([`cegen`]).

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod cegen;
pub mod classifier;
pub mod data;
pub mod dequant;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod persist;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
