//! Scalar abstraction over `f32`/`f64`.
//!
//! Production paths run in `f32`; gradient verification and the renderer
//! equivalence oracle run the same code in `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub trait Real:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + std::iter::Sum<Self> + 'static
{
    const EPS_BEHIND: Self;

    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }
}

impl Real for f32 {
    const EPS_BEHIND: Self = 1e-8;
}

impl Real for f64 {
    const EPS_BEHIND: Self = 1e-8;
}

/// Shorthand for lifting an `f64` literal into the generic scalar type.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64c(x)
}
