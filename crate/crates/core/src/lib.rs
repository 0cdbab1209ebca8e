//! Numerical laboratory for recovering polyhedral interfaces of piecewise-constant
//! Helmholtz potentials from Dirichlet-to-Neumann data.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: exact tetrahedron geometry (volumes, inspheres, distances,
//!   Hausdorff metrics, convex clipping and intersection volumes).
//! - [`partition`]: regular tetrahedral partitions, piecewise-constant fields,
//!   vertex deformations and their affine flows.
//! - [`fem`]: conforming P1/P2 finite elements for `Δu + ω²qu = 0` on the
//!   partitioned domain or on the augmented ball, with exact integration of the
//!   piecewise-constant coefficient on a fixed background mesh.
//! - [`dtn`]: discrete Dirichlet-to-Neumann matrices, the fractional boundary
//!   Gram, the ⋆-operator norm and the Alessandrini pairing.
//! - [`cgo_fourier`]: complex geometrical optics probes and Fourier-side
//!   estimation of potential differences.
//! - [`stability`]: partition matching, vertex correspondence and Lipschitz sweeps.
//! - [`shape`]: shape derivatives of the DtN pairing and derivative-norm probes.
//! - [`reconstruction`]: Landweber-type recovery of vertex positions.
//! - [`experiment`]: JSON-configured, deterministic experiment drivers behind the CLI.

pub mod cgo_fourier;
pub mod dtn;
mod error;
pub mod experiment;
pub mod fem;
pub mod fixtures;
pub mod geometry;
pub mod partition;
pub mod quadrature;
pub mod reconstruction;
pub mod shape;
pub mod stability;

pub use error::{Error, Result};
pub use geometry::{Point3, Tetrahedron};
pub use partition::{Deformation, Partition, PiecewiseField, ValueSet};
