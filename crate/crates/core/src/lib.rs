//! Topological localization of a bronchoscope in an airway tree.
//!
//! Per-frame label likelihoods are smoothed by a chain-structured energy whose
//! transition cost grows with the hop distance between airway segments. The
//! crate provides the tree model, exact MAP decoding and min-sum marginals,
//! temperature calibration, fitting of the smoothing weight, evaluation
//! metrics, a walk simulator and a command-line front end.

pub mod calibration;
pub mod cli;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod simulator;
pub mod tree;
pub mod tuning;
pub mod util;

pub use error::{Error, Result};
pub use inference::{Boundary, CostModel, DecodeResult, LikelihoodSequence};
pub use tree::{AirwayTree, DistanceMatrix, RegularizationMatrix};
