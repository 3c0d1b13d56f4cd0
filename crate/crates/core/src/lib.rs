//! Online graph dictionary learning with (fused) Gromov-Wasserstein unmixing.
//!
//! Graphs of varying order are projected onto a learned linear dictionary of
//! fixed-order graph atoms. The crate provides the exact OT engine, the
//! conditional-gradient (F)GW solvers, the unmixing BCD, stochastic dictionary
//! updates, and the embedding-space tools built on top (Mahalanobis bound,
//! k-means, Rand Index, streaming change detection).

pub mod cli;
pub mod dictionary;
pub mod embedding;
pub mod error;
pub mod exact_ot;
pub mod gw;
pub mod io;
pub mod model;
pub mod sbm;
pub mod unmixing;

pub use error::{GdlError, Result};
