// SPDX-License-Identifier: MIT OR Apache-2.0

//! Floating-point abstraction shared by the tensor engine and the transformer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Gathers the traits the numeric core needs from a floating point type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + LinalgScalar + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
