//! Balanced policy evaluation and learning for right-censored data.
//!
//! The crate covers the full pipeline: simulation of censored observational
//! data, survival-curve estimation and outcome imputation, kernel
//! hyperparameter tuning by GP marginal likelihood, balanced-weight policy
//! value estimators, softmax policy learning, and a reproducible benchmark
//! runner exposed through the `survpol` binary.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod gp;
pub mod kernel;
pub(crate) mod linalg;
pub mod propensity;
pub mod sim;
pub mod survival;

pub use error::{Result, SurvError};
