//! Desk-scale federated masked-pretraining simulator and model library for
//! time-series foundation models.
//!
//! Clients hold heterogeneous multi-resolution series and train a shared
//! patch-based encoder with a trend-aware expert sublayer under a masked
//! reconstruction objective; the server averages parameters sample-weighted,
//! and an alignment penalty keeps each client's expert sublayer close to the
//! broadcast global one. A unified head adapts the pretrained encoder to
//! forecasting, imputation, and anomaly detection.

pub mod data;
pub mod downstream;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod harness;
pub mod mat;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
