//! Semi-supervised imitation learning with inverse dynamics models on
//! gridworlds: autodiff core, environments, learners, latent-action
//! pipelines, a tabular verifier and an experiment harness.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod latent;
pub mod learning;
pub mod models;
pub mod verifier;

pub use error::{Error, Result};
