//! Floating-point element type for the learning code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` constant or configuration value, rounding if needed.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion from f64 is total")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion to f64 is total")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
