//! Gradient flows in weighted Wasserstein metrics on planar, possibly
//! non-convex, domains.
//!
//! The crate provides a masked-grid discretization ([`grid`], [`calculus`]),
//! concave mobilities ([`mobility`]), a dynamic transport solver
//! ([`transport`]), the PDE kernels used as semigroups and references
//! ([`kernels`]), a minimizing-movement driver ([`jko`]) and numerical checks
//! of the contraction inequalities ([`evi`], [`battery`]).

pub mod battery;
pub mod calculus;
pub mod error;
pub mod evi;
pub mod field;
pub mod grid;
pub mod io;
pub mod jko;
pub mod kernels;
pub mod linalg;
pub mod mobility;
pub mod shape;
pub mod transport;

pub use error::{Condition, Error, Result};
pub use field::{ScalarField, VectorField};
pub use grid::{BoundaryFace, Dir, DomainGrid};
pub use mobility::{EntropyDensity, Mobility, RegularizedMobility, SupConstants};
pub use shape::Shape;
