use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the differentiable core, the detector and the metrics.
///
/// Implemented for `f32` and `f64`. Everything that leaves the process
/// (checkpoints, reports) goes through `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name recorded in checkpoints.
    const NAME: &'static str;

    fn from_real(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every Scalar")
    }

    fn to_real(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count converts to every Scalar")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
