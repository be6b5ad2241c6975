//! Per-matrix selection logits.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::real::Real;

/// Standard deviation of the logit initialization distribution.
pub const LOGIT_INIT_STD: f64 = 0.01;

/// Which factor a logit tensor parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// Rows span the input dimension of the adapted matrix.
    A,
    /// Columns span the output dimension of the adapted matrix.
    B,
}

impl Side {
    pub fn tag(self) -> u8 {
        match self {
            Side::A => 0,
            Side::B => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Side::A),
            1 => Some(Side::B),
            _ => None,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::A => write!(f, "A"),
            Side::B => write!(f, "B"),
        }
    }
}

/// Learnable selection logits for one side of one adapted matrix.
///
/// Shape is `(d/b, r, h)`: one length-`h` logit row per sub-vector, where the
/// grid of sub-vectors has `d/b` block positions by `r` rank components.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTensor<F: Real> {
    values: Array3<F>,
    side: Side,
}

impl<F: Real> LogitTensor<F> {
    pub fn from_values(values: Array3<F>, side: Side) -> Self {
        Self { values, side }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// `d/b`: sub-vector blocks along the spanned dimension.
    pub fn num_blocks(&self) -> usize {
        self.values.dim().0
    }

    pub fn rank(&self) -> usize {
        self.values.dim().1
    }

    /// Bank size this tensor selects over (`h`).
    pub fn bank_size(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<F> {
        &mut self.values
    }

    /// Logit row for the sub-vector at block `j`, rank component `i`.
    pub fn row(&self, j: usize, i: usize) -> ndarray::ArrayView1<'_, F> {
        self.values.slice(ndarray::s![j, i, ..])
    }
}

/// Initializes a `(d_dim/b, r, h)` logit tensor with entries i.i.d.
/// Normal(0, std 0.01), drawn in row-major order from a ChaCha stream.
pub fn init_logits<F: Real>(
    d_dim: usize,
    b: usize,
    r: usize,
    h: usize,
    side: Side,
    seed: u64,
) -> Result<LogitTensor<F>> {
    if d_dim == 0 || b == 0 || r == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "logit dimensions must be positive, got d_dim={d_dim}, b={b}, r={r}, h={h}"
        )));
    }
    if d_dim % b != 0 {
        return Err(Error::InvalidArgument(format!(
            "dimension {d_dim} is not divisible by sub-vector length {b}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, LOGIT_INIT_STD).expect("valid normal parameters");
    let values = Array3::from_shape_fn((d_dim / b, r, h), |_| F::from_f64(rng.sample(dist)));
    Ok(LogitTensor::from_values(values, side))
}
