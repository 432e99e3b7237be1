//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};

/// Floating-point scalar the geometry and metric kernels are generic over.
pub trait Scalar: num_traits::Float + Debug + Display + 'static {
    /// Lossy conversion from `f64`, for constants and config values.
    fn from_f64(v: f64) -> Self;

    /// Lossy conversion to `f64`, for reporting.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
