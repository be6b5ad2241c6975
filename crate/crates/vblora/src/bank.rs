//! The globally shared vector bank.

use ndarray::Array2;
use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Half-width of the uniform initialization interval.
pub const BANK_INIT_RANGE: f64 = 0.02;

/// A bank of `h` basis vectors of length `b`, shared across every adapted
/// matrix, module, and layer. Rows are the basis vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorBank<F: Real> {
    values: Array2<F>,
}

impl<F: Real> VectorBank<F> {
    /// Wraps an existing matrix. Rows are bank vectors.
    pub fn from_values(values: Array2<F>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "vector bank must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "vector bank contains non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Number of bank vectors (`h`).
    pub fn num_vectors(&self) -> usize {
        self.values.nrows()
    }

    /// Length of each bank vector (`b`).
    pub fn vector_len(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<F> {
        &mut self.values
    }

    pub fn row(&self, s: usize) -> ndarray::ArrayView1<'_, F> {
        self.values.row(s)
    }
}

/// Initializes an `h`x`b` bank with entries i.i.d. uniform on
/// [-0.02, 0.02]. Deterministic for a fixed seed: entries are drawn in
/// row-major order from a ChaCha stream.
pub fn init_bank<F: Real>(h: usize, b: usize, seed: u64) -> Result<VectorBank<F>> {
    if h == 0 || b == 0 {
        return Err(Error::InvalidArgument(format!(
            "bank dimensions must be positive, got h={h}, b={b}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-BANK_INIT_RANGE, BANK_INIT_RANGE)
        .expect("valid uniform bounds");
    let values = Array2::from_shape_fn((h, b), |_| F::from_f64(rng.sample(dist)));
    VectorBank::from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sized_bank_is_in_range() {
        let bank = init_bank::<f32>(90, 256, 0).unwrap();
        assert_eq!(bank.num_vectors(), 90);
        assert_eq!(bank.vector_len(), 256);
        assert!(bank
            .values()
            .iter()
            .all(|&v| (-0.02..=0.02).contains(&v) && v.is_finite()));
    }

    #[test]
    fn single_scalar_bank() {
        let bank = init_bank::<f32>(1, 1, 7).unwrap();
        let v = bank.values()[[0, 0]];
        assert!((-0.02..=0.02).contains(&v));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = init_bank::<f32>(3, 2, 42).unwrap();
        let b = init_bank::<f32>(3, 2, 42).unwrap();
        assert_eq!(a.values(), b.values());
        let c = init_bank::<f32>(3, 2, 43).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(init_bank::<f32>(0, 4, 0).is_err());
        assert!(init_bank::<f32>(4, 0, 0).is_err());
    }

    #[test]
    fn f32_and_f64_draw_the_same_sequence() {
        let a = init_bank::<f32>(4, 3, 5).unwrap();
        let b = init_bank::<f64>(4, 3, 5).unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
