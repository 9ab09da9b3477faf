//! Floating-point element types the kernels are generic over.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Element type of tensors and parameters: `f32` or `f64`.
///
/// Reductions widen to `f64` and narrow once per stored value, so the two
/// precisions share one code path and differ only in storage rounding.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Display + Send + Sync + 'static {
    /// Name used in diagnostics.
    const NAME: &'static str;

    fn widen(self) -> f64;

    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}
