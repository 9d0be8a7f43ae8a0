//! The scalar abstraction under every numeric module.
//!
//! Generic code takes `F: Scalar` and pulls constants in through
//! [`Scalar::from_f64`]; the crate root fixes `f64` for the shipped
//! pipeline, and `f32` stays available for experiments where checkpoint
//! compatibility does not matter.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Conversion from `f64`, for literals and config values.
    fn c(v: f64) -> Self;

    /// Widening (or identity) conversion back out, for reporting.
    fn as_f64(self) -> f64;
}

macro_rules! scalar_impl {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            #[inline]
            fn c(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    )*};
}

scalar_impl!(f32, f64);
