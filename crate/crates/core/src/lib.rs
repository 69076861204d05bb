//! Topology verification for power distribution grids.
//!
//! Given the candidate line infrastructure with impedances, second-order
//! statistics of nodal power injections, and a short window of smart-meter
//! voltage magnitudes, estimate which lines are energized by minimizing a
//! Gaussian negative log-likelihood (or a MAP variant) over the relaxed
//! line-indicator vector `b ∈ [0,1]^Le`, then rounding to a binary topology.

pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod ldf;
pub mod likelihood;
pub mod linalg;
pub mod pipeline;
pub mod round;
pub mod solve;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Bus, GridModel, Line};
pub use ldf::{LdfMatrices, Mode};
pub use likelihood::{Likelihood, MapObjective, ModelKind, Objective};
pub use stats::{InjectionStatistics, VoltageDataset};
