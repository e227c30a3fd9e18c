//! Scalar element abstraction.
//!
//! Compute runs in `f32` by default; tests that compare against central finite
//! differences instantiate the same code at `f64` to keep truncation error out
//! of the comparison.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type usable by the tensor engine.
pub trait Element: Float + Debug + Send + Sync + 'static {
    /// Converts an `f64` constant into this element type.
    fn from_f64(v: f64) -> Self;

    /// Widens to `f64` for accumulation and reporting.
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
