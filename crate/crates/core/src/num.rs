//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an exact integer count.
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).unwrap_or_else(Self::infinity)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Bytes per binary gigabyte.
pub const GIB: u64 = 1 << 30;

/// Converts a byte count to binary gigabytes.
pub fn bytes_to_gib<S: Scalar>(bytes: u64) -> S {
    S::from_count(bytes) / S::from_count(GIB)
}
