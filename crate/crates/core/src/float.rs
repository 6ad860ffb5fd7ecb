use std::fmt;
use std::iter::Sum;

use num_traits::{FromPrimitive, NumAssignOps, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Scalar trait for every numeric kernel in the crate.
///
/// `f32` and `f64` both implement it; the pipeline itself runs on `f64`
/// (see [`crate::Real`]).
pub trait Float:
    num_traits::Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + fmt::Debug
    + fmt::Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` literals and RNG draws.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to Float")
    }
}

impl Float for f32 {}
impl Float for f64 {}
