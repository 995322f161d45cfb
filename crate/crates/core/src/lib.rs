//! Regularized unbalanced optimal transport with Pearson divergence.
//!
//! The crate solves the δ-regularized problem on uniform grids with a
//! six-sequence proximal iteration, turns the solution into transport
//! dynamics through a monotone Monge–Ampère map, and compiles the resulting
//! velocity field into explicit neural-ODE parameters.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod monge_ampere;
pub mod neural;
pub mod pipeline;
pub mod quadrature;
pub mod reference;
pub mod sinkhorn;
pub mod uot;

pub use error::{Result, UotError};
pub use grid::{Axis, CostGrid, CostKind, Grid, GridDensity};
pub use uot::{Coupling, DualPotentials, ProblemSpec};
