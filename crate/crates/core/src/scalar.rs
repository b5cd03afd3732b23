//! Probability scalar abstraction.
//!
//! Every threshold comparison and confidence sum in the engine is written
//! against [`Probability`], so the same decoder runs on `f64` (the default),
//! `f32`, or an exact rational such as `Ratio<i64>`. Exact rationals are what
//! the enumeration oracle uses when its output must be compared bit-for-bit
//! against an independent brute-force computation.

use std::fmt::Debug;
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Scalar type usable as a probability / confidence value.
pub trait Probability:
    Num + Copy + PartialOrd + Debug + FromPrimitive + ToPrimitive + Sum + Send + Sync + 'static
{
    /// Lossy conversion used for serialization and reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Conversion from configuration values. Panics only for non-finite input,
    /// which config validation rejects first.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite probability value")
    }
}

impl Probability for f32 {}
impl Probability for f64 {}
impl Probability for Ratio<i64> {}
impl Probability for Ratio<i128> {}

/// `a > b` with NaN treated as smaller than everything.
#[inline]
pub(crate) fn gt<P: PartialOrd>(a: P, b: P) -> bool {
    matches!(a.partial_cmp(&b), Some(std::cmp::Ordering::Greater))
}
