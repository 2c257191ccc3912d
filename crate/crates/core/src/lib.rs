//! Supervised spatial divide-and-conquer (S-DC) object counting.
//!
//! Closed-set counters only ever predict counts in `[0, C_max]`. S-DC keeps
//! splitting dense regions into 2×2 sub-regions until every local count falls
//! back inside that range, then merges the per-level predictions with learned
//! division masks and redistribution maps.

pub mod error;
pub mod grid;
pub mod gridio;
pub mod groundtruth;
pub mod losses;
pub mod metrics;
pub mod sdc;
pub mod synthcells;
pub mod theory;
pub mod toymodel;

pub use error::{Result, SdcError};
pub use grid::{CountGrid, DivisionMask, Grid, UpsamplingMap};
