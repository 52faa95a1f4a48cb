use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal. Panics only if the literal is not representable,
    /// which cannot happen for the finite constants used in this crate.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
