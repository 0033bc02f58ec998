//! Scalar abstraction for policy and gradient arithmetic.
//!
//! All core math is generic over `Scalar` so the same code runs in f32 or
//! f64. The shipped binaries and config layer instantiate f64; the crate
//! root exports concrete aliases.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an f64 constant into the working scalar type.
///
/// Panics only if the value is not representable at all, which cannot
/// happen for finite f64 -> f32/f64 conversions.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant must convert to scalar type")
}
