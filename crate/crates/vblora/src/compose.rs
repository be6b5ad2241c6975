//! Assembly of the low-rank factor matrices from bank and logits.
//!
//! Each side of an adapted matrix is a `(d/b, r)` grid of sub-vectors. The A
//! factor lays the grid out as `r` rows of length `d_in`; the B factor lays it
//! out as `d_out` rows by `r` columns, so each column is a concatenation of
//! sub-vectors. Grid traversal order is fixed (block-major, then rank) and is
//! part of the serialization contract.

use ndarray::{s, Array2};

use crate::bank::VectorBank;
use crate::error::{Error, Result};
use crate::logits::LogitTensor;
use crate::real::Real;
use crate::tkam::{topk_admix, SubVector};

/// Where a pair of composed factors came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub bank_vectors: usize,
    pub subvector_len: usize,
    pub top_k: usize,
}

/// The composed pair: `a` is `r x d_in`, `b` is `d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedFactors<F: Real> {
    pub a: Array2<F>,
    pub b: Array2<F>,
    pub provenance: Provenance,
}

impl<F: Real> ComposedFactors<F> {
    pub fn new(a: Array2<F>, b: Array2<F>, provenance: Provenance) -> Result<Self> {
        if a.nrows() != b.ncols() {
            return Err(Error::InvalidArgument(format!(
                "rank mismatch between factors: a has {} rows, b has {} columns",
                a.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b, provenance })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }
}

fn check_shapes<F: Real>(logits: &LogitTensor<F>, bank: &VectorBank<F>) -> Result<()> {
    if logits.bank_size() != bank.num_vectors() {
        return Err(Error::InvalidArgument(format!(
            "logit tensor selects over {} bank rows but the bank has {}",
            logits.bank_size(),
            bank.num_vectors()
        )));
    }
    Ok(())
}

/// Composes every sub-vector of the `(d/b, r)` grid in the canonical order:
/// block index `j` outermost, rank component `i` innermost. The flat vector
/// index is `j * r + i`.
pub(crate) fn compose_grid<F, S>(
    logits: &LogitTensor<F>,
    mut select: S,
) -> Result<Vec<SubVector<F>>>
where
    F: Real,
    S: FnMut(ndarray::ArrayView1<'_, F>) -> Result<SubVector<F>>,
{
    let (blocks, rank, _) = logits.values().dim();
    let mut subs = Vec::with_capacity(blocks * rank);
    for j in 0..blocks {
        for i in 0..rank {
            subs.push(select(logits.row(j, i))?);
        }
    }
    Ok(subs)
}

pub(crate) fn assemble_a<F: Real>(
    subs: &[SubVector<F>],
    blocks: usize,
    rank: usize,
    b: usize,
) -> Array2<F> {
    let mut a = Array2::zeros((rank, blocks * b));
    for j in 0..blocks {
        for i in 0..rank {
            a.slice_mut(s![i, j * b..(j + 1) * b])
                .assign(&subs[j * rank + i].values);
        }
    }
    a
}

pub(crate) fn assemble_b<F: Real>(
    subs: &[SubVector<F>],
    blocks: usize,
    rank: usize,
    b: usize,
) -> Array2<F> {
    let mut m = Array2::zeros((blocks * b, rank));
    for j in 0..blocks {
        for i in 0..rank {
            m.slice_mut(s![j * b..(j + 1) * b, i])
                .assign(&subs[j * rank + i].values);
        }
    }
    m
}

/// Composes the A factor (`r x d_in`): row `i` is the concatenation of the
/// grid's column `i` sub-vectors.
pub fn compose_a<F: Real>(
    logits: &LogitTensor<F>,
    bank: &VectorBank<F>,
    k: usize,
) -> Result<Array2<F>> {
    check_shapes(logits, bank)?;
    let subs = compose_grid(logits, |sigma| topk_admix(&sigma, bank, k))?;
    Ok(assemble_a(
        &subs,
        logits.num_blocks(),
        logits.rank(),
        bank.vector_len(),
    ))
}

/// Composes the B factor (`d_out x r`): column `i` is the concatenation of
/// the grid's column `i` sub-vectors.
pub fn compose_b<F: Real>(
    logits: &LogitTensor<F>,
    bank: &VectorBank<F>,
    k: usize,
) -> Result<Array2<F>> {
    check_shapes(logits, bank)?;
    let subs = compose_grid(logits, |sigma| topk_admix(&sigma, bank, k))?;
    Ok(assemble_b(
        &subs,
        logits.num_blocks(),
        logits.rank(),
        bank.vector_len(),
    ))
}

/// Composes both factors of one adapted matrix.
pub fn compose_factors<F: Real>(
    logits_a: &LogitTensor<F>,
    logits_b: &LogitTensor<F>,
    bank: &VectorBank<F>,
    k: usize,
) -> Result<ComposedFactors<F>> {
    if logits_a.rank() != logits_b.rank() {
        return Err(Error::InvalidArgument(format!(
            "factor rank mismatch: A-side has r={}, B-side has r={}",
            logits_a.rank(),
            logits_b.rank()
        )));
    }
    let a = compose_a(logits_a, bank, k)?;
    let b = compose_b(logits_b, bank, k)?;
    ComposedFactors::new(
        a,
        b,
        Provenance {
            bank_vectors: bank.num_vectors(),
            subvector_len: bank.vector_len(),
            top_k: k,
        },
    )
}

/// Dense weight increment `delta = b . a`, shape `d_out x d_in`.
pub fn merge_delta<F: Real>(factors: &ComposedFactors<F>) -> Array2<F> {
    factors.b.dot(&factors.a)
}

/// Adds the dense increment onto a frozen `d_in x d_out` weight applied as
/// `y = x . w`: the increment enters transposed so that the merged forward
/// matches [`adapted_forward`].
pub fn merge_into_weight<F: Real>(
    w: &Array2<F>,
    factors: &ComposedFactors<F>,
) -> Result<Array2<F>> {
    if w.nrows() != factors.d_in() || w.ncols() != factors.d_out() {
        return Err(Error::InvalidArgument(format!(
            "weight is {}x{} but factors imply {}x{}",
            w.nrows(),
            w.ncols(),
            factors.d_in(),
            factors.d_out()
        )));
    }
    Ok(w + &merge_delta(factors).t())
}

/// `y = x . w + (x . a^T) . b^T` without materializing the dense increment.
pub fn adapted_forward<F: Real>(
    x: &Array2<F>,
    w: &Array2<F>,
    factors: &ComposedFactors<F>,
) -> Result<Array2<F>> {
    if x.ncols() != w.nrows() {
        return Err(Error::InvalidArgument(format!(
            "input width {} does not match weight rows {}",
            x.ncols(),
            w.nrows()
        )));
    }
    if factors.d_in() != w.nrows() || factors.d_out() != w.ncols() {
        return Err(Error::InvalidArgument(format!(
            "factors ({}x{} increment) do not match weight {}x{}",
            factors.d_out(),
            factors.d_in(),
            w.nrows(),
            w.ncols()
        )));
    }
    let hidden = x.dot(&factors.a.t());
    Ok(x.dot(w) + hidden.dot(&factors.b.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::init_bank;
    use crate::logits::{init_logits, Side};
    use ndarray::{array, Array3};

    fn one_hot_logits(blocks: usize, rank: usize, h: usize, hot: usize) -> LogitTensor<f32> {
        let mut v = Array3::zeros((blocks, rank, h));
        v.slice_mut(s![.., .., hot]).fill(5.0);
        LogitTensor::from_values(v, Side::A)
    }

    #[test]
    fn one_hot_selection_tiles_the_chosen_vector() {
        let bank = VectorBank::from_values(array![[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let logits = one_hot_logits(2, 1, 2, 0);
        let a = compose_a(&logits, &bank, 1).unwrap();
        assert_eq!(a, array![[1.0, 2.0, 1.0, 2.0]]);
    }

    #[test]
    fn one_hot_column_layout() {
        let bank = VectorBank::from_values(array![[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let logits = one_hot_logits(2, 1, 2, 1);
        let b = compose_b(&logits, &bank, 1).unwrap();
        assert_eq!(b, array![[3.0], [4.0], [3.0], [4.0]]);
    }

    #[test]
    fn paper_configuration_shapes() {
        let bank = init_bank::<f32>(90, 256, 0).unwrap();
        let la = init_logits::<f32>(1024, 256, 4, 90, Side::A, 1).unwrap();
        let lb = init_logits::<f32>(1024, 256, 4, 90, Side::B, 2).unwrap();
        let f = compose_factors(&la, &lb, &bank, 2).unwrap();
        assert_eq!(f.a.dim(), (4, 1024));
        assert_eq!(f.b.dim(), (1024, 4));
    }

    #[test]
    fn b_is_transpose_of_a_for_shared_logits() {
        let bank = init_bank::<f32>(6, 4, 3).unwrap();
        let logits = init_logits::<f32>(16, 4, 3, 6, Side::A, 4).unwrap();
        let a = compose_a(&logits, &bank, 2).unwrap();
        let b = compose_b(&logits, &bank, 2).unwrap();
        assert_eq!(b, a.t().to_owned());
    }

    #[test]
    fn rank_one_outer_product() {
        let f = ComposedFactors::new(
            array![[3.0f64, 4.0]],
            array![[1.0], [2.0]],
            Provenance {
                bank_vectors: 1,
                subvector_len: 1,
                top_k: 1,
            },
        )
        .unwrap();
        assert_eq!(merge_delta(&f), array![[3.0, 4.0], [6.0, 8.0]]);
    }

    #[test]
    fn zero_logits_tile_uniform_admixture() {
        // All-zero logits select rows {0, 1} with weights (0.5, 0.5) everywhere,
        // so every sub-vector equals the mean of the first two bank rows and the
        // dense increment is rank-deficient with b x b tiles r * mean_s * mean_t.
        let bank =
            VectorBank::from_values(array![[1.0f64, -2.0], [3.0, 6.0], [10.0, 10.0]]).unwrap();
        let zeros_a = LogitTensor::from_values(Array3::zeros((2, 2, 3)), Side::A);
        let zeros_b = LogitTensor::from_values(Array3::zeros((2, 2, 3)), Side::B);
        let f = compose_factors(&zeros_a, &zeros_b, &bank, 2).unwrap();
        let mean = array![2.0, 2.0]; // 0.5*(1,−2) + 0.5*(3,6)
        let delta = merge_delta(&f);
        let r = 2.0;
        for p in 0..4 {
            for q in 0..4 {
                let expect = r * mean[p % 2] * mean[q % 2];
                assert!((delta[[p, q]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bank_forward_is_exactly_base() {
        let bank = VectorBank::from_values(Array2::<f32>::zeros((3, 2))).unwrap();
        let la = init_logits::<f32>(4, 2, 2, 3, Side::A, 5).unwrap();
        let lb = init_logits::<f32>(4, 2, 2, 3, Side::B, 6).unwrap();
        let f = compose_factors(&la, &lb, &bank, 2).unwrap();
        let x = array![[1.0f32, -2.0, 0.5, 3.0], [0.0, 1.0, 2.0, -1.0]];
        let w = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f32 * 0.25 - 1.0);
        let y = adapted_forward(&x, &w, &f).unwrap();
        assert_eq!(y, x.dot(&w));
    }

    #[test]
    fn identity_input_zero_weight_recovers_delta() {
        let bank = init_bank::<f64>(4, 2, 7).unwrap();
        let la = init_logits::<f64>(6, 2, 2, 4, Side::A, 8).unwrap();
        let lb = init_logits::<f64>(6, 2, 2, 4, Side::B, 9).unwrap();
        let f = compose_factors(&la, &lb, &bank, 2).unwrap();
        let x = Array2::eye(6);
        let w = Array2::zeros((6, 6));
        let y = adapted_forward(&x, &w, &f).unwrap();
        let delta = merge_delta(&f);
        for i in 0..6 {
            for j in 0..6 {
                assert!((y[[i, j]] - delta[[j, i]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let bank = init_bank::<f32>(4, 2, 7).unwrap();
        let la = init_logits::<f32>(4, 2, 2, 4, Side::A, 8).unwrap();
        let lb = init_logits::<f32>(6, 2, 2, 4, Side::B, 9).unwrap();
        let f = compose_factors(&la, &lb, &bank, 2).unwrap();
        let x = array![[1.0f32, 2.0, 3.0, 4.0]];
        let w_bad = Array2::<f32>::zeros((5, 6));
        assert!(adapted_forward(&x, &w_bad, &f).is_err());
        let bank_small = init_bank::<f32>(3, 2, 7).unwrap();
        assert!(compose_a(&la, &bank_small, 2).is_err());
    }
}
