//! Feasible model-based gradient boosting for spatial regression models
//! with autoregressive disturbances (SEM, SLX and SDEM designs).
//!
//! The estimator runs in three steps: a first-step trend fit that ignores
//! the spatial error structure, a moment estimate of the autoregressive
//! parameter and innovation variance from its residuals, and component-wise
//! boosting under the Mahalanobis loss implied by those estimates.

pub mod boost;
pub mod cli;
pub mod data;
pub mod error;
pub mod family;
pub mod manifest;
pub mod moments;
pub mod pipeline;
pub mod seed;
pub mod simstudy;
pub mod weights;

pub use error::{Error, Result};
