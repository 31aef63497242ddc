//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar the transform learning runs on.
///
/// Implemented for `f32` and `f64`. All shipped configurations and the
/// tolerances quoted in the docs assume `f64`.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal or configuration value into this scalar type.
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn of_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}
