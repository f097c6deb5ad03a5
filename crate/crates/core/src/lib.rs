//! Population dynamics of a two-level non-Hermitian system driven slowly
//! around closed loops in parameter space.

pub mod asymptotics;
pub mod complex;
pub mod error;
pub mod experiments;
pub mod model;
pub mod precision;
pub mod propagator;

pub use error::{Error, Result};
pub use model::{Branch, BranchSelection, Direction, LoopClass, LoopGeometry, TrackedRatio};
pub use precision::{PrecisionSpec, SeedMode};
