//! Scalar abstraction for the linear-algebra substrate.
//!
//! The cone layer (matrices, projective action, Perron data) is written
//! against this trait so it works for any IEEE float width. The stochastic
//! pipeline (sampling, estimators, serialization) is pinned to `f64`; see
//! the type aliases at the crate root.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable by the cone layer.
///
/// `c(x)` lifts an `f64` constant (tolerances, small rationals) into the
/// scalar type. Lifting must not fail for the constants used internally,
/// which are all representable in `f32`.
pub trait Real:
    Float + FromPrimitive + core::fmt::Debug + core::fmt::Display + core::iter::Sum + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}
