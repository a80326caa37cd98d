//! Cross-modal retrieval under continual learning.
//!
//! Two-branch embedding networks map image and text features into a shared
//! space, trained task by task with a bi-directional triplet ranking loss.
//! A quadratic penalty weighted by estimated parameter importance limits
//! forgetting, a versioned embedding index serves retrieval under reindex or
//! no-reindex policies, and the engine reproduces joint and continual
//! training variants with per-stage recall evaluation.

mod byteio;

pub mod data;
pub mod engine;
pub mod error;
pub mod grid;
pub mod index;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod reg;
pub mod snapshot;
