//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that does arithmetic on policy parameters is generic over
//! [`Scalar`]. The runtime instantiates it with `f32`; the gradient oracles
//! instantiate the same code with `f64` so that central differences are not
//! drowned in single-precision round-off.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Convert from an `f64` literal or intermediate.
    fn lit(x: f64) -> Self;

    /// Widen to `f64` for accumulation.
    fn widen(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline(always)]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn widen(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dot product with a 64-bit accumulator.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}
