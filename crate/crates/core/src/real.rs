//! Float abstraction for the differentiable path.
//!
//! The pipeline runs in f32; gradient-check tests instantiate the same code
//! at f64 so central differences are meaningful.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Scalar type for tensors flowing through the backbone and losses.
pub trait Scalar: NdFloat + FromPrimitive + Default {
    fn c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("constant conversion")
    }
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}
