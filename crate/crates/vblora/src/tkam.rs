//! Top-k admixture: sparse selection over the bank with exact gradients.
//!
//! A sub-vector is composed as `u = sum_s w_s * alpha_s` where the weights are
//! a softmax over the k largest logits and every other bank row is masked out.
//! The masked logits carry a hard zero gradient; the selected ones follow the
//! softmax Jacobian restricted to the survivors.

use ndarray::{Array1, ArrayView1};

use crate::bank::VectorBank;
use crate::error::{Error, Result};
use crate::real::{Real, WIDEN_THRESHOLD};

/// One composed sub-vector together with its selection.
///
/// `indices` are bank rows in descending-logit order (ties broken by lower
/// index); `weights` match that order, are nonnegative, and sum to 1. The last
/// weight is defined as one minus the sum of the others, so the simplex
/// constraint holds exactly and serialization can drop it losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct SubVector<F: Real> {
    pub values: Array1<F>,
    pub indices: Vec<u32>,
    pub weights: Vec<F>,
}

/// Gradients of a scalar loss through one sub-vector.
#[derive(Debug, Clone)]
pub struct TkamGrad<F: Real> {
    /// Dense over all `h` logits; exactly zero outside the selection.
    pub grad_sigma: Array1<F>,
    /// Sparse bank-row gradients, one per selected row, in selection order.
    pub grad_bank_rows: Vec<(usize, Array1<F>)>,
}

pub(crate) fn validate_sigma<F: Real>(sigma: &ArrayView1<'_, F>) -> Result<()> {
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "selection logits contain a non-finite value".into(),
        ));
    }
    Ok(())
}

/// All indices ordered by descending logit, ties by lower index.
pub(crate) fn rank_all<F: Real>(sigma: &ArrayView1<'_, F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .expect("logits validated finite")
            .then(i.cmp(&j))
    });
    order
}

/// The k selected indices in canonical (descending-logit) order.
pub fn select_topk<F: Real>(sigma: &ArrayView1<'_, F>, k: usize) -> Result<Vec<usize>> {
    let h = sigma.len();
    if k == 0 || k > h {
        return Err(Error::InvalidArgument(format!(
            "top-k count must satisfy 1 <= k <= h, got k={k}, h={h}"
        )));
    }
    validate_sigma(sigma)?;
    let mut order = rank_all(sigma);
    order.truncate(k);
    Ok(order)
}

/// Softmax over the given logit values, which must already be in
/// descending order. The last weight is closed to `1 - sum(rest)`.
pub(crate) fn softmax_descending<F: Real>(selected: &[F]) -> Vec<F> {
    let top = selected[0];
    let exps: Vec<F> = selected.iter().map(|&s| (s - top).exp()).collect();
    let z: F = exps.iter().copied().sum();
    let mut weights: Vec<F> = exps.iter().map(|&e| e / z).collect();
    let k = weights.len();
    let partial: F = weights[..k - 1].iter().copied().sum();
    weights[k - 1] = F::one() - partial;
    weights
}

/// `sum_s w_s * bank[row_s]`, accumulated in f64 for f32 storage when the
/// bank is large enough that rounding would drown finite-difference checks.
pub(crate) fn mix_rows<F: Real>(
    bank: &VectorBank<F>,
    indices: &[u32],
    weights: &[F],
) -> Array1<F> {
    let b = bank.vector_len();
    let widen = F::WIDENS && bank.num_vectors() * b > WIDEN_THRESHOLD;
    let mut out = Array1::zeros(b);
    if widen {
        let mut acc = vec![0.0f64; b];
        for (&idx, &w) in indices.iter().zip(weights) {
            let row = bank.row(idx as usize);
            let wf = w.to_f64();
            for (a, &r) in acc.iter_mut().zip(row.iter()) {
                *a += wf * r.to_f64();
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = F::from_f64(a);
        }
    } else {
        for (&idx, &w) in indices.iter().zip(weights) {
            let row = bank.row(idx as usize);
            for (o, &r) in out.iter_mut().zip(row.iter()) {
                *o += w * r;
            }
        }
    }
    out
}

fn dot<F: Real>(a: &ArrayView1<'_, F>, b: &ArrayView1<'_, F>, widen: bool) -> F {
    if widen {
        let mut acc = 0.0f64;
        for (&x, &y) in a.iter().zip(b.iter()) {
            acc += x.to_f64() * y.to_f64();
        }
        F::from_f64(acc)
    } else {
        let mut acc = F::zero();
        for (&x, &y) in a.iter().zip(b.iter()) {
            acc += x * y;
        }
        acc
    }
}

/// Composes one sub-vector from the bank: softmax over the k largest logits,
/// weighted sum of the selected rows.
pub fn topk_admix<F: Real>(
    sigma: &ArrayView1<'_, F>,
    bank: &VectorBank<F>,
    k: usize,
) -> Result<SubVector<F>> {
    if sigma.len() != bank.num_vectors() {
        return Err(Error::InvalidArgument(format!(
            "logit length {} does not match bank size {}",
            sigma.len(),
            bank.num_vectors()
        )));
    }
    let selection = select_topk(sigma, k)?;
    let selected_logits: Vec<F> = selection.iter().map(|&s| sigma[s]).collect();
    let weights = softmax_descending(&selected_logits);
    let indices: Vec<u32> = selection.iter().map(|&s| s as u32).collect();
    let values = mix_rows(bank, &indices, &weights);
    Ok(SubVector {
        values,
        indices,
        weights,
    })
}

/// Backward pass through one sub-vector.
///
/// For a selected row `s`: `d loss/d sigma_s = w_s * (alpha_s - u) . grad_u`
/// and the bank row receives `w_s * grad_u`. Unselected logits and bank rows
/// get exactly zero.
pub fn tkam_backward<F: Real>(
    grad_u: &ArrayView1<'_, F>,
    sigma: &ArrayView1<'_, F>,
    bank: &VectorBank<F>,
    k: usize,
) -> Result<TkamGrad<F>> {
    if grad_u.len() != bank.vector_len() {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient length {} does not match sub-vector length {}",
            grad_u.len(),
            bank.vector_len()
        )));
    }
    if grad_u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "upstream gradient contains a non-finite value".into(),
        ));
    }
    let sub = topk_admix(sigma, bank, k)?;
    Ok(backward_from_selection(
        grad_u,
        bank,
        &sub.indices,
        &sub.weights,
        &sub.weights,
        F::one(),
        &sub.values,
        sigma.len(),
    ))
}

/// Shared backward core, parameterized so the ablation variants can reuse it.
///
/// `mix_weights` are the weights used in the forward value (they scale the
/// bank-row gradients); `jac_weights` and `jac_mix` define the softmax
/// Jacobian path for the logits, scaled by `jac_scale` (1/tau for
/// Gumbel-style paths, 1 otherwise).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_from_selection<F: Real>(
    grad_u: &ArrayView1<'_, F>,
    bank: &VectorBank<F>,
    indices: &[u32],
    mix_weights: &[F],
    jac_weights: &[F],
    jac_scale: F,
    jac_mix: &Array1<F>,
    h: usize,
) -> TkamGrad<F> {
    let widen = F::WIDENS && h * bank.vector_len() > WIDEN_THRESHOLD;
    let mut grad_sigma = Array1::zeros(h);
    let mut grad_bank_rows = Vec::with_capacity(indices.len());
    for ((&idx, &w), &q) in indices.iter().zip(mix_weights).zip(jac_weights) {
        let row = bank.row(idx as usize);
        // (alpha_s - u) . grad_u
        let centered = &row - jac_mix;
        let slope = dot(&centered.view(), grad_u, widen);
        grad_sigma[idx as usize] = jac_scale * q * slope;
        grad_bank_rows.push((idx as usize, grad_u.map(|&g| g * w)));
    }
    TkamGrad {
        grad_sigma,
        grad_bank_rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn toy_bank() -> VectorBank<f64> {
        VectorBank::from_values(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()
    }

    #[test]
    fn worked_example_two_of_three() {
        let bank = toy_bank();
        let sigma = array![2.0, 1.0, 0.0];
        let sub = topk_admix(&sigma.view(), &bank, 2).unwrap();
        assert_eq!(sub.indices, vec![0, 1]);
        // exp(2)/(exp(2)+exp(1)) evaluated in high precision
        let w0 = 0.731_058_578_630_004_9;
        assert!((sub.weights[0] - w0).abs() < 1e-12);
        assert!((sub.weights[1] - (1.0 - w0)).abs() < 1e-12);
        assert!((sub.values[0] - 0.7311).abs() < 1e-4);
        assert!((sub.values[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn singleton_softmax_is_exact() {
        let bank = toy_bank();
        let sigma = array![5.0, 0.0, 0.0];
        let sub = topk_admix(&sigma.view(), &bank, 1).unwrap();
        assert_eq!(sub.indices, vec![0]);
        assert_eq!(sub.weights, vec![1.0]);
        assert_eq!(sub.values, bank.row(0).to_owned());
    }

    #[test]
    fn constant_logits_tie_break_by_index() {
        let bank = toy_bank();
        for c in [-3.5, 0.0, 7.25] {
            let sigma = array![c, c, c];
            let sub = topk_admix(&sigma.view(), &bank, 2).unwrap();
            assert_eq!(sub.indices, vec![0, 1]);
            assert_eq!(sub.weights, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn invalid_arguments_rejected() {
        let bank = toy_bank();
        let sigma = array![1.0, 2.0, 3.0];
        assert!(topk_admix(&sigma.view(), &bank, 0).is_err());
        assert!(topk_admix(&sigma.view(), &bank, 4).is_err());
        let bad = array![1.0, f64::NAN, 0.0];
        assert!(topk_admix(&bad.view(), &bank, 2).is_err());
        let short = array![1.0, 2.0];
        assert!(topk_admix(&short.view(), &bank, 1).is_err());
    }

    #[test]
    fn k_equals_one_has_zero_logit_gradient() {
        let bank = toy_bank();
        let sigma = array![0.3, -0.1, 0.9];
        let grad_u = array![1.0, -2.0];
        let grad = tkam_backward(&grad_u.view(), &sigma.view(), &bank, 1).unwrap();
        assert!(grad.grad_sigma.iter().all(|&g| g == 0.0));
        assert_eq!(grad.grad_bank_rows.len(), 1);
        assert_eq!(grad.grad_bank_rows[0].0, 2);
        assert_eq!(grad.grad_bank_rows[0].1, grad_u);
    }

    #[test]
    fn unselected_rows_get_exact_zero() {
        let bank = toy_bank();
        let sigma = array![2.0, 1.0, 0.0];
        let grad_u = array![1.0, 0.0];
        let grad = tkam_backward(&grad_u.view(), &sigma.view(), &bank, 2).unwrap();
        assert_eq!(grad.grad_sigma[2], 0.0);
        assert!(grad.grad_bank_rows.iter().all(|(idx, _)| *idx != 2));
    }

    /// Central finite differences of `loss = u . g` with respect to every
    /// logit and every bank entry, in f64.
    #[test]
    fn backward_matches_finite_differences() {
        let bank = toy_bank();
        let sigma = array![2.0, 1.0, 0.0];
        let g = array![1.0, 0.0];
        let k = 2;
        let eps = 1e-5;
        let loss = |sig: &Array1<f64>, bk: &VectorBank<f64>| -> f64 {
            let sub = topk_admix(&sig.view(), bk, k).unwrap();
            sub.values.dot(&g)
        };

        let grad = tkam_backward(&g.view(), &sigma.view(), &bank, k).unwrap();

        for j in 0..3 {
            let mut up = sigma.clone();
            let mut dn = sigma.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (loss(&up, &bank) - loss(&dn, &bank)) / (2.0 * eps);
            let analytic = grad.grad_sigma[j];
            let denom = fd.abs().max(analytic.abs()).max(1e-12);
            assert!(
                (fd - analytic).abs() / denom < 1e-6,
                "sigma[{j}]: fd={fd}, analytic={analytic}"
            );
        }

        let mut dense_bank_grad = Array2::<f64>::zeros((3, 2));
        for (idx, row) in &grad.grad_bank_rows {
            dense_bank_grad.row_mut(*idx).assign(row);
        }
        for s in 0..3 {
            for t in 0..2 {
                let mut up = bank.values().clone();
                let mut dn = bank.values().clone();
                up[[s, t]] += eps;
                dn[[s, t]] -= eps;
                let fd = (loss(&sigma, &VectorBank::from_values(up).unwrap())
                    - loss(&sigma, &VectorBank::from_values(dn).unwrap()))
                    / (2.0 * eps);
                let analytic = dense_bank_grad[[s, t]];
                let denom = fd.abs().max(analytic.abs()).max(1e-12);
                assert!(
                    (fd - analytic).abs() / denom < 1e-6,
                    "bank[{s},{t}]: fd={fd}, analytic={analytic}"
                );
            }
        }
    }
}
