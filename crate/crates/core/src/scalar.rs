use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type the numerical modules are generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossless-enough conversion from `f64` constants and wire values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every float scalar")
    }

    fn of_f32(v: f32) -> Self {
        Self::of(v as f64)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
