//! Self-supervised cross-view retrieval with cluster and instance memories.
//!
//! Drone and satellite views share a single encoder. Every epoch the whole
//! corpus is embedded, clustered per view with DBSCAN, and the resulting
//! pseudo-labels seed cluster memories (single and dual/hierarchical) and
//! per-instance memories. Minibatches are trained against those memories with
//! contrastive, hierarchical and neighborhood-consistency losses, and an
//! optional perturbation vote refines the satellite-to-drone label mapping.
//!
//! The math kernels are row-parallel through [`exec::Exec`]; building without
//! the `parallel` feature removes the rayon dependency and every kernel falls
//! back to a sequential loop with identical results.

pub mod clustering;
pub mod datagen;
pub mod dhml;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod icel;
pub mod memory;
pub mod metrics;
pub mod numcore;
pub mod ple;
pub mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, ErrorClass, Result};
pub use exec::Exec;
pub use numcore::{Matrix, Rng};

/// Capture platform of an image or feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Drone,
    Satellite,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::Drone => View::Satellite,
            View::Satellite => View::Drone,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Drone => "drone",
            View::Satellite => "satellite",
        })
    }
}
