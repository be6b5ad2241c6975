//! Scalar abstraction over the two supported precisions.
//!
//! Storage is float32 throughout the library; float64 instantiations exist so
//! that finite-difference oracles and high-precision checks run the exact same
//! code path at higher precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Element type for banks, logits, activations, and gradients.
pub trait Real:
    Float + NumAssign + LinalgScalar + ScalarOperand + Sum + Debug + Display + Send + Sync + 'static
{
    /// True when long reductions should widen to f64 (i.e. for f32 storage).
    const WIDENS: bool;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Bit pattern, zero-extended to 64 bits. Used for exact checksums.
    fn bits(self) -> u64;
}

impl Real for f32 {
    const WIDENS: bool = true;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    #[inline]
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Real for f64 {
    const WIDENS: bool = false;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Reduction length above which f32 dot products accumulate in f64.
pub const WIDEN_THRESHOLD: usize = 1 << 16;
