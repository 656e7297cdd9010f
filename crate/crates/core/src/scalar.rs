//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for values the type cannot represent at all.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable as scalar")
    }

    /// Relative tolerance for "is this Gram matrix invertible" checks.
    ///
    /// `1e-10` in double precision; single precision falls back to a
    /// multiple of machine epsilon since `1e-10` is below its resolution.
    fn conditioning_tol() -> Self {
        Self::lit(1e-10).max(Self::epsilon() * Self::lit(100.0))
    }

    /// Relative tolerance used when deciding positive (semi)definiteness.
    fn psd_tol() -> Self {
        Self::lit(1e-8).max(Self::epsilon() * Self::lit(1000.0))
    }

    /// Exact for any count the crate deals with.
    fn count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable as scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
