//! Numerical laboratory for the fixed point of the branching affine
//! recursion R =d sum_{i=1..N} A_i R_i + B over positive random matrices.
//!
//! Layers, bottom up:
//!
//! * [`cone`]: exact linear algebra on nonnegative matrices, the
//!   projective action on the positive unit sphere, Perron eigendata.
//! * [`model`]: scenario description (matrix law, input vector law,
//!   moment exponents), sampling, and hypothesis audits.
//! * [`spectral`]: the s-transfer operator on a sphere mesh, its
//!   eigendata, the tail exponent chi solving N kappa(chi) = 1, and the
//!   tilted Lyapunov exponent alpha.
//! * [`branching`]: weighted-branching simulation of the fixed point by
//!   truncated tree sums, with depth planning from moment decay.
//! * [`tailkit`]: tail estimation and the renewal-theoretic constants,
//!   smoothing and defect functions, and the moment-inequality harness.
//!
//! The cone layer is generic over the scalar type; everything stochastic
//! is pinned to `f64` through the aliases below.

pub mod branching;
pub mod cone;
pub mod grid;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod stats;
pub mod tailkit;

pub use scalar::Real;

/// Working matrix type of the stochastic pipeline.
pub type Matrix = cone::PositiveMatrix<f64>;
/// Perron eigendata at working precision.
pub type Perron = cone::PerronData<f64>;
