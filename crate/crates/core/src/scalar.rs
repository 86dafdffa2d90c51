use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar the kernels and the network are generic over.
///
/// Implemented for `f32` (the inference type, matching the on-disk weight
/// format) and `f64` (used by tests to run the same code paths at higher
/// precision).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Default + Send + Sync + 'static
{
    fn of_f32(v: f32) -> Self;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn of_f32(v: f32) -> Self {
        v
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f32(v: f32) -> Self {
        v as f64
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}
