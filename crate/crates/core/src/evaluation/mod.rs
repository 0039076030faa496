//! Fréchet distance over probe-feature statistics, the pairwise
//! content x style protocol, and comparison grids.

pub mod frechet;
pub mod grid;
pub mod protocol;
pub mod stats;

pub use frechet::frechet_distance;
pub use grid::{emit_grid, GridReport};
pub use protocol::{pairwise_protocol, FidRecord, ProtocolOptions, ProtocolResult};
pub use stats::{accumulate_statistics, FeatureStatistics};
