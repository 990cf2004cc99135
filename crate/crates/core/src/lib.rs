//! Multiscale flatness analysis for discrete measures.
//!
//! This crate takes a finite weighted point set in `ℝ^d` (a discrete stand-in
//! for a Radon measure) and computes the machinery used in quantitative
//! rectifiability:
//!
//! - flatness coefficients: Jones-type `β_p` numbers, the dual-Lipschitz
//!   `α` coefficient, and Wasserstein-based `α_p` coefficients,
//! - square functions of those coefficients over geometric scale grids,
//!   and the induced good/bad point split,
//! - a David–Mattila style lattice of "dyadic cubes" over the support,
//!   with doubling and strongly-doubling cube detection,
//! - a corona-type stopping-time decomposition (`HD`/`LD`/`BS`/`BA`/`F`
//!   stopping families), the Lipschitz graph built from the tree, and the
//!   AD-regular approximating measure supported on the graph.
//!
//! Everything is deterministic: identical inputs and configuration produce
//! bit-identical results, including the witnesses (minimizing planes,
//! constants, transport plans) attached to each coefficient.
//!
//! The exact optimal-transport solver lives in [`transport`]; the localized
//! dual-Lipschitz distance `F_B` in [`lipschitz`]. Both return certificates
//! (dual potentials, feasible plans) that the test suites verify
//! independently of the solver path.

pub mod coeffs;
pub mod decomp;
pub mod error;
pub mod generators;
pub mod io;
mod kdtree;
pub mod lattice;
pub mod lipschitz;
pub mod measure;
pub mod plane;
mod simplex;
pub mod transport;
pub(crate) mod vecmath;

pub use error::{CoreError, Result};
pub use measure::{Ball, DiscreteMeasure};
pub use plane::{AffinePlane, PlaneQuadrature};
