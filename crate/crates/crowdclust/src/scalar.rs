//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Real`], which is
//! implemented for `f32` and `f64`. Tolerances in the algorithms are specified
//! as `f64` constants and converted with [`Real::of`]; with `f32` they
//! degrade to the type's resolution (iteration caps keep every search finite).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Shorthand for converting an `f64` constant.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant converts to Real")
    }

    /// Lossy view as `f64` (exact for `f32`/`f64` inputs).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// Conversion from a count.
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize converts to Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}
