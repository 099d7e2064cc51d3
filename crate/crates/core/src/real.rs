//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the tensor engine, model and trainer are generic
/// over. Implemented for `f32` and `f64`; concrete aliases live at the
/// crate root.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 literals (panics only on types
    /// that cannot represent ordinary finite constants).
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
