//! Floating-point abstraction shared by the scoring and metric code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for BM25 scores and evaluation metrics: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite literal")
    }

    /// Converts a count.
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in a float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
