//! Ablated vector-selection mechanisms behind one interface.
//!
//! Training-time selection is policy-dependent and may be stochastic;
//! inference-time selection is always deterministic and noise-free. The
//! Gumbel paths fall back to a clean top-`inference_k` softmax at inference.

use ndarray::Array1;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::bank::VectorBank;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tkam::{
    backward_from_selection, mix_rows, rank_all, softmax_descending, topk_admix, validate_sigma,
    SubVector, TkamGrad,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    TopK,
    NoisyTopK,
    GumbelSoftmax,
    StraightThroughGS,
    SelectAll,
}

impl SelectionKind {
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            SelectionKind::NoisyTopK
                | SelectionKind::GumbelSoftmax
                | SelectionKind::StraightThroughGS
        )
    }

    pub fn is_gumbel(self) -> bool {
        matches!(
            self,
            SelectionKind::GumbelSoftmax | SelectionKind::StraightThroughGS
        )
    }

    /// Config-file token for this kind.
    pub fn key(self) -> &'static str {
        match self {
            SelectionKind::TopK => "topk",
            SelectionKind::NoisyTopK => "noisy_topk",
            SelectionKind::GumbelSoftmax => "gs",
            SelectionKind::StraightThroughGS => "st_gs",
            SelectionKind::SelectAll => "select_all",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "topk" => Some(SelectionKind::TopK),
            "noisy_topk" => Some(SelectionKind::NoisyTopK),
            "gs" => Some(SelectionKind::GumbelSoftmax),
            "st_gs" => Some(SelectionKind::StraightThroughGS),
            "select_all" => Some(SelectionKind::SelectAll),
            _ => None,
        }
    }
}

/// How sub-vectors are selected during training and at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub kind: SelectionKind,
    /// Selection count for the top-k paths.
    pub k: usize,
    /// Temperature for the Gumbel paths.
    pub tau: f64,
    /// Clean top-k fallback used by the noisy/Gumbel paths at inference.
    pub inference_k: usize,
    /// Standard deviation of the logit perturbation for noisy top-k.
    pub noise_scale: f64,
}

impl SelectionPolicy {
    pub fn top_k(k: usize) -> Self {
        Self {
            kind: SelectionKind::TopK,
            k,
            tau: 1.0,
            inference_k: k,
            noise_scale: 0.0,
        }
    }

    pub fn validate(&self, bank_size: usize) -> Result<()> {
        let uses_k = matches!(self.kind, SelectionKind::TopK | SelectionKind::NoisyTopK);
        if uses_k && (self.k == 0 || self.k > bank_size) {
            return Err(Error::InvalidArgument(format!(
                "selection k must satisfy 1 <= k <= h, got k={}, h={bank_size}",
                self.k
            )));
        }
        if self.kind.is_gumbel() && !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gumbel temperature must be positive, got tau={}",
                self.tau
            )));
        }
        if self.kind.is_gumbel() && (self.inference_k == 0 || self.inference_k > bank_size) {
            return Err(Error::InvalidArgument(format!(
                "inference_k must satisfy 1 <= inference_k <= h, got {}, h={bank_size}",
                self.inference_k
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise_scale must be nonnegative, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }

    /// Number of bank rows in the forward support during training.
    pub fn train_support(&self, bank_size: usize) -> usize {
        match self.kind {
            SelectionKind::TopK | SelectionKind::NoisyTopK => self.k,
            SelectionKind::GumbelSoftmax | SelectionKind::SelectAll => bank_size,
            SelectionKind::StraightThroughGS => 1,
        }
    }

    /// Number of bank rows selected by the inference path (what gets stored).
    pub fn inference_support(&self, bank_size: usize) -> usize {
        match self.kind {
            SelectionKind::TopK | SelectionKind::NoisyTopK => self.k,
            SelectionKind::SelectAll => bank_size,
            SelectionKind::GumbelSoftmax | SelectionKind::StraightThroughGS => self.inference_k,
        }
    }
}

enum BackwardPlan<F: Real> {
    /// Softmax Jacobian restricted to the forward selection.
    Restricted,
    /// Dense softmax Jacobian with a temperature factor (Gumbel-softmax).
    Dense { scale: F },
    /// Hard one-hot forward, soft dense distribution on the gradient path.
    StraightThrough {
        soft_indices: Vec<u32>,
        soft_weights: Vec<F>,
        soft_mix: Array1<F>,
        scale: F,
    },
}

/// The result of a training-time selection: the composed sub-vector plus the
/// gradient path matching how it was produced.
pub struct SelectionOutcome<F: Real> {
    pub sub: SubVector<F>,
    plan: BackwardPlan<F>,
}

impl<F: Real> SelectionOutcome<F> {
    /// Gradients of a scalar loss through this selection.
    pub fn backward(
        &self,
        grad_u: &ndarray::ArrayView1<'_, F>,
        bank: &VectorBank<F>,
    ) -> TkamGrad<F> {
        let h = bank.num_vectors();
        match &self.plan {
            BackwardPlan::Restricted => backward_from_selection(
                grad_u,
                bank,
                &self.sub.indices,
                &self.sub.weights,
                &self.sub.weights,
                F::one(),
                &self.sub.values,
                h,
            ),
            BackwardPlan::Dense { scale } => backward_from_selection(
                grad_u,
                bank,
                &self.sub.indices,
                &self.sub.weights,
                &self.sub.weights,
                *scale,
                &self.sub.values,
                h,
            ),
            BackwardPlan::StraightThrough {
                soft_indices,
                soft_weights,
                soft_mix,
                scale,
            } => {
                let mut grad = backward_from_selection(
                    grad_u,
                    bank,
                    soft_indices,
                    soft_weights,
                    soft_weights,
                    *scale,
                    soft_mix,
                    h,
                );
                // Value path is the hard one-hot: only the argmax row sees grad_u.
                grad.grad_bank_rows = vec![(self.sub.indices[0] as usize, grad_u.to_owned())];
                grad
            }
        }
    }
}

fn require_rng<'a>(
    rng: Option<&'a mut dyn RngCore>,
    kind: SelectionKind,
) -> Result<&'a mut dyn RngCore> {
    rng.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "selection kind `{}` is stochastic and requires an rng stream",
            kind.key()
        ))
    })
}

fn standard_gumbel(rng: &mut dyn RngCore) -> f64 {
    // g = -ln(-ln(U)) with U drawn from the open interval (0, 1).
    let u = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Dense softmax over perturbed-and-scaled logits, in descending-z order.
fn dense_softmax_selection<F: Real>(z: &[f64], bank: &VectorBank<F>) -> SubVector<F> {
    let zf: Array1<F> = z.iter().map(|&v| F::from_f64(v)).collect();
    let order = rank_all(&zf.view());
    let sorted: Vec<F> = order.iter().map(|&s| zf[s]).collect();
    let weights = softmax_descending(&sorted);
    let indices: Vec<u32> = order.iter().map(|&s| s as u32).collect();
    let values = mix_rows(bank, &indices, &weights);
    SubVector {
        values,
        indices,
        weights,
    }
}

/// Training-time selection under the given policy.
pub fn select_train<F: Real>(
    policy: &SelectionPolicy,
    sigma: &ndarray::ArrayView1<'_, F>,
    bank: &VectorBank<F>,
    rng: Option<&mut dyn RngCore>,
) -> Result<SelectionOutcome<F>> {
    let h = bank.num_vectors();
    policy.validate(h)?;
    validate_sigma(sigma)?;
    match policy.kind {
        SelectionKind::TopK => Ok(SelectionOutcome {
            sub: topk_admix(sigma, bank, policy.k)?,
            plan: BackwardPlan::Restricted,
        }),
        SelectionKind::SelectAll => Ok(SelectionOutcome {
            sub: topk_admix(sigma, bank, h)?,
            plan: BackwardPlan::Restricted,
        }),
        SelectionKind::NoisyTopK => {
            let rng = require_rng(rng, policy.kind)?;
            // Perturbed logits pick the set; clean logits set the weights.
            let noisy: Vec<F> = sigma
                .iter()
                .map(|&s| {
                    let n: f64 = rng.sample(StandardNormal);
                    s + F::from_f64(policy.noise_scale * n)
                })
                .collect();
            let noisy = Array1::from(noisy);
            let mut picked = rank_all(&noisy.view());
            picked.truncate(policy.k);
            // Canonical order: descending clean logit, ties by lower index.
            picked.sort_by(|&i, &j| {
                sigma[j]
                    .partial_cmp(&sigma[i])
                    .expect("logits validated finite")
                    .then(i.cmp(&j))
            });
            let selected_logits: Vec<F> = picked.iter().map(|&s| sigma[s]).collect();
            let weights = softmax_descending(&selected_logits);
            let indices: Vec<u32> = picked.iter().map(|&s| s as u32).collect();
            let values = mix_rows(bank, &indices, &weights);
            Ok(SelectionOutcome {
                sub: SubVector {
                    values,
                    indices,
                    weights,
                },
                plan: BackwardPlan::Restricted,
            })
        }
        SelectionKind::GumbelSoftmax => {
            let rng = require_rng(rng, policy.kind)?;
            let z: Vec<f64> = sigma
                .iter()
                .map(|&s| (s.to_f64() + standard_gumbel(rng)) / policy.tau)
                .collect();
            let sub = dense_softmax_selection(&z, bank);
            Ok(SelectionOutcome {
                sub,
                plan: BackwardPlan::Dense {
                    scale: F::from_f64(1.0 / policy.tau),
                },
            })
        }
        SelectionKind::StraightThroughGS => {
            let rng = require_rng(rng, policy.kind)?;
            let z: Vec<f64> = sigma
                .iter()
                .map(|&s| (s.to_f64() + standard_gumbel(rng)) / policy.tau)
                .collect();
            let soft = dense_softmax_selection(&z, bank);
            let hard = soft.indices[0];
            let hard_sub = SubVector {
                values: bank.row(hard as usize).to_owned(),
                indices: vec![hard],
                weights: vec![F::one()],
            };
            Ok(SelectionOutcome {
                sub: hard_sub,
                plan: BackwardPlan::StraightThrough {
                    soft_indices: soft.indices,
                    soft_weights: soft.weights,
                    soft_mix: soft.values,
                    scale: F::from_f64(1.0 / policy.tau),
                },
            })
        }
    }
}

/// Inference-time selection: deterministic and noise-free for every kind.
pub fn select_infer<F: Real>(
    policy: &SelectionPolicy,
    sigma: &ndarray::ArrayView1<'_, F>,
    bank: &VectorBank<F>,
) -> Result<SubVector<F>> {
    let h = bank.num_vectors();
    policy.validate(h)?;
    let k = match policy.kind {
        SelectionKind::TopK | SelectionKind::NoisyTopK => policy.k,
        SelectionKind::SelectAll => h,
        SelectionKind::GumbelSoftmax | SelectionKind::StraightThroughGS => policy.inference_k,
    };
    topk_admix(sigma, bank, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::init_bank;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_and_sigma() -> (VectorBank<f64>, Array1<f64>) {
        let bank = init_bank::<f64>(5, 3, 11).unwrap();
        let sigma = array![0.4, -0.2, 0.9, 0.0, 0.3];
        (bank, sigma)
    }

    #[test]
    fn topk_policy_delegates_bit_for_bit() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy::top_k(2);
        let out = select_train(&policy, &sigma.view(), &bank, None).unwrap();
        let direct = topk_admix(&sigma.view(), &bank, 2).unwrap();
        assert_eq!(out.sub, direct);
    }

    #[test]
    fn zero_noise_degenerates_to_topk() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy {
            kind: SelectionKind::NoisyTopK,
            k: 2,
            tau: 1.0,
            inference_k: 2,
            noise_scale: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = select_train(&policy, &sigma.view(), &bank, Some(&mut rng)).unwrap();
        let direct = topk_admix(&sigma.view(), &bank, 2).unwrap();
        assert_eq!(out.sub, direct);
    }

    #[test]
    fn gumbel_softmax_is_dense_on_the_simplex() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy {
            kind: SelectionKind::GumbelSoftmax,
            k: 2,
            tau: 1.0 / 3.0,
            inference_k: 2,
            noise_scale: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = select_train(&policy, &sigma.view(), &bank, Some(&mut rng)).unwrap();
        assert_eq!(out.sub.indices.len(), 5);
        let sum: f64 = out.sub.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(out.sub.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn straight_through_forward_is_exactly_one_bank_row() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy {
            kind: SelectionKind::StraightThroughGS,
            k: 2,
            tau: 1.0 / 3.0,
            inference_k: 1,
            noise_scale: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = select_train(&policy, &sigma.view(), &bank, Some(&mut rng)).unwrap();
        assert_eq!(out.sub.indices.len(), 1);
        assert_eq!(out.sub.weights, vec![1.0]);
        let row = bank.row(out.sub.indices[0] as usize);
        assert_eq!(out.sub.values, row.to_owned());
    }

    #[test]
    fn stochastic_kinds_require_rng() {
        let (bank, sigma) = bank_and_sigma();
        for kind in [
            SelectionKind::NoisyTopK,
            SelectionKind::GumbelSoftmax,
            SelectionKind::StraightThroughGS,
        ] {
            let policy = SelectionPolicy {
                kind,
                k: 2,
                tau: 0.5,
                inference_k: 1,
                noise_scale: 1.0,
            };
            assert!(select_train(&policy, &sigma.view(), &bank, None).is_err());
        }
    }

    #[test]
    fn inference_paths_are_clean_topk() {
        let (bank, sigma) = bank_and_sigma();
        let noisy = SelectionPolicy {
            kind: SelectionKind::NoisyTopK,
            k: 2,
            tau: 1.0,
            inference_k: 2,
            noise_scale: 1.0,
        };
        let infer = select_infer(&noisy, &sigma.view(), &bank).unwrap();
        let direct = topk_admix(&sigma.view(), &bank, 2).unwrap();
        assert_eq!(infer, direct);

        let gs = SelectionPolicy {
            kind: SelectionKind::GumbelSoftmax,
            k: 2,
            tau: 1.0 / 3.0,
            inference_k: 1,
            noise_scale: 0.0,
        };
        let one_hot = select_infer(&gs, &sigma.view(), &bank).unwrap();
        assert_eq!(one_hot.indices, vec![2]); // argmax of sigma
        assert_eq!(one_hot.weights, vec![1.0]);

        // No hidden state: repeated calls are identical.
        let again = select_infer(&gs, &sigma.view(), &bank).unwrap();
        assert_eq!(one_hot, again);
    }

    #[test]
    fn select_all_matches_topk_with_k_equals_h() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy {
            kind: SelectionKind::SelectAll,
            k: 1,
            tau: 1.0,
            inference_k: 1,
            noise_scale: 0.0,
        };
        let out = select_train(&policy, &sigma.view(), &bank, None).unwrap();
        let direct = topk_admix(&sigma.view(), &bank, 5).unwrap();
        assert_eq!(out.sub, direct);
    }

    #[test]
    fn invalid_policies_rejected() {
        let (bank, sigma) = bank_and_sigma();
        let bad_tau = SelectionPolicy {
            kind: SelectionKind::GumbelSoftmax,
            k: 2,
            tau: 0.0,
            inference_k: 1,
            noise_scale: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_train(&bad_tau, &sigma.view(), &bank, Some(&mut rng)).is_err());
        let bad_k = SelectionPolicy::top_k(6);
        assert!(select_train(&bad_k, &sigma.view(), &bank, None).is_err());
    }

    /// Finite-difference check of the Gumbel-softmax gradient path with the
    /// noise held fixed by replaying the same rng stream.
    #[test]
    fn gumbel_backward_matches_finite_differences() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy {
            kind: SelectionKind::GumbelSoftmax,
            k: 2,
            tau: 1.0 / 3.0,
            inference_k: 2,
            noise_scale: 0.0,
        };
        let g = array![1.0, -0.5, 2.0];
        let eval = |sig: &Array1<f64>| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let out = select_train(&policy, &sig.view(), &bank, Some(&mut rng)).unwrap();
            out.sub.values.dot(&g)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = select_train(&policy, &sigma.view(), &bank, Some(&mut rng)).unwrap();
        let grad = out.backward(&g.view(), &bank);
        let eps = 1e-6;
        for j in 0..5 {
            let mut up = sigma.clone();
            let mut dn = sigma.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * eps);
            let analytic = grad.grad_sigma[j];
            let denom = fd.abs().max(analytic.abs()).max(1e-10);
            assert!(
                (fd - analytic).abs() / denom < 1e-5,
                "sigma[{j}]: fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn noisy_topk_backward_matches_finite_differences() {
        let (bank, sigma) = bank_and_sigma();
        let policy = SelectionPolicy {
            kind: SelectionKind::NoisyTopK,
            k: 3,
            tau: 1.0,
            inference_k: 3,
            noise_scale: 0.1,
        };
        let g = array![0.3, 1.0, -1.2];
        let eval = |sig: &Array1<f64>| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let out = select_train(&policy, &sig.view(), &bank, Some(&mut rng)).unwrap();
            out.sub.values.dot(&g)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = select_train(&policy, &sigma.view(), &bank, Some(&mut rng)).unwrap();
        let grad = out.backward(&g.view(), &bank);
        let eps = 1e-6;
        for j in 0..5 {
            let mut up = sigma.clone();
            let mut dn = sigma.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * eps);
            let analytic = grad.grad_sigma[j];
            let denom = fd.abs().max(analytic.abs()).max(1e-10);
            assert!(
                (fd - analytic).abs() / denom < 1e-5,
                "sigma[{j}]: fd={fd} analytic={analytic}"
            );
        }
    }
}
