//! Training-data influence estimation from checkpoint trajectories.
//!
//! The library trains small classifiers, stores their per-epoch checkpoint
//! trajectories, and scores how much each training example influenced the
//! model using loss information alone (finite-difference directional
//! gradients and loss-variance self-influence), alongside a first-order
//! TracIn baseline and a subsample-and-retrain oracle. An evaluation layer
//! compares methods by Spearman rank correlation and top-k overlap.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod influence;
pub mod models;
pub mod numeric;
pub mod ssrt;
pub mod store;
pub mod training;

pub use error::{Error, Result};
