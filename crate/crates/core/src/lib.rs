//! Informative path planning for active learning in UAV-based semantic mapping.
//!
//! A budgeted aerial agent flies over a synthetic semantic terrain, fuses
//! per-pixel predictions of a small probabilistic classifier into a
//! multi-layer terrain map, and plans where to collect the next training
//! images using acquisition-function driven objectives.
//!
//! Module overview:
//!
//! - [`terrain`]: synthetic terrains, the nadir camera and its footprints.
//! - [`model`]: the desk-scale pixel classifier (training, MC dropout, ensembles).
//! - [`acquire`]: mutual information, entropy and latent novelty scores.
//! - [`map`]: log-odds semantic layers and running-mean score layers.
//! - [`plan`]: cost model, map-based planners and baselines.
//! - [`mission`]: multi-mission campaigns and evaluation metrics.
//!
//! With the default `parallel` feature, candidate evaluation, ensemble
//! training and test-set evaluation run on rayon; without it everything
//! runs sequentially and produces identical results.

pub mod acquire;
mod error;
pub mod map;
pub mod metrics;
pub mod mission;
pub mod model;
pub mod par;
pub mod pgm;
pub mod plan;
pub mod terrain;

pub use error::{Error, Result};
