//! Scalar abstraction shared by every numeric module.

use nalgebra as na;
use num_traits as nt;

/// Floating point scalar used throughout the crate.
///
/// Implemented for `f32` and `f64`. Random draws are always generated in
/// `f64` and converted, so statistical behaviour is identical for both.
pub trait Real:
    na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + std::fmt::LowerExp
{
    /// Converts an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        na::convert(x)
    }

    /// Converts a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        na::convert(n as f64)
    }

    /// Lossy conversion to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Norms below this are treated as exactly zero by the whitening maps.
pub(crate) const NORM_FLOOR: f64 = 1e-300;
