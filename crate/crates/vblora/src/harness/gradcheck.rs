//! Finite-difference verification of the analytic adapter gradients.
//!
//! Central differences with a relative step (eps = 1e-4 * max(1, |theta|))
//! against the full model loss, in whatever precision the model carries
//! (f64 for the tolerance-grade checks). A logit perturbation that changes
//! the top-k selection sits on a non-differentiable boundary; those entries
//! are flagged and excluded rather than compared.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tkam::select_topk;

use super::model::{loss_and_backward, TinyModel};

const EPS_REL: f64 = 1e-4;

/// Absolute noise floor of the central difference itself: rounding of the
/// f64 loss (~1e-13 after accumulation) divided by the 2e-4 step, with
/// margin. Entries whose gradients sit below `atol / rtol` are compared
/// absolutely; a wrong Jacobian still trips the check because the tolerance
/// product is tiny.
const FD_ATOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub atol: f64,
    /// Largest relative error over all compared entries, with the
    /// denominator floored at `atol / tolerance`.
    pub max_rel_error: f64,
    /// Largest absolute analytic-vs-fd difference.
    pub max_abs_diff: f64,
    pub bank_entries: usize,
    pub selected_logits: usize,
    /// Logit entries skipped because +/-eps changed the selection.
    pub excluded_boundary: usize,
    /// True when every unselected logit had an exactly-zero analytic gradient.
    pub unselected_exact_zero: bool,
    /// Largest |finite difference| seen on unselected logits away from
    /// selection boundaries.
    pub max_unselected_fd: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.unselected_exact_zero
    }

    fn compare(&mut self, a: f64, f: f64, describe: impl FnOnce() -> String) {
        let diff = (a - f).abs();
        let scale = a.abs().max(f.abs());
        let rel = diff / scale.max(self.atol / self.tolerance);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
        }
        if diff > self.max_abs_diff {
            self.max_abs_diff = diff;
        }
        if diff > self.atol + self.tolerance * scale {
            self.failures.push(format!(
                "{}: analytic {a:e}, fd {f:e}, abs diff {diff:e}",
                describe()
            ));
        }
    }
}

fn eval_loss(model: &TinyModel<f64>, tokens: &Array2<usize>) -> Result<f64> {
    Ok(loss_and_backward(model, tokens, None, false)?.loss)
}

/// Compares analytic gradients against central finite differences for every
/// bank entry and every selected logit, on the given fixed batch.
pub fn grad_check(
    model: &TinyModel<f64>,
    tokens: &Array2<usize>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if model.adapter_cfg.policy.kind.is_stochastic() {
        return Err(Error::InvalidArgument(
            "gradient checking requires a deterministic selection policy".into(),
        ));
    }
    let base = loss_and_backward(model, tokens, None, true)?;
    let grads = base.grads.expect("gradients requested");

    let mut work = model.clone();
    let mut report = GradCheckReport {
        tolerance,
        atol: FD_ATOL,
        max_rel_error: 0.0,
        max_abs_diff: 0.0,
        bank_entries: 0,
        selected_logits: 0,
        excluded_boundary: 0,
        unselected_exact_zero: true,
        max_unselected_fd: 0.0,
        failures: Vec::new(),
    };

    // Bank entries: selection never depends on bank values, so no boundaries.
    let (h, b) = model.adapters.bank.values().dim();
    for s in 0..h {
        for t in 0..b {
            let theta = model.adapters.bank.values()[[s, t]];
            let eps = EPS_REL * theta.abs().max(1.0);
            work.adapters.bank.values_mut()[[s, t]] = theta + eps;
            let up = eval_loss(&work, tokens)?;
            work.adapters.bank.values_mut()[[s, t]] = theta - eps;
            let dn = eval_loss(&work, tokens)?;
            work.adapters.bank.values_mut()[[s, t]] = theta;
            let fd = (up - dn) / (2.0 * eps);
            let analytic = grads.bank[[s, t]];
            report.bank_entries += 1;
            report.compare(analytic, fd, || format!("bank[{s},{t}]"));
        }
    }

    // Logits: per sub-vector, check selected entries against finite
    // differences and unselected entries for hard zeros.
    let k = model.adapter_cfg.policy.inference_support(h);
    for unit_idx in 0..model.adapters.units.len() {
        for side in 0..2 {
            let dims = {
                let unit = &model.adapters.units[unit_idx];
                let logits = if side == 0 { &unit.logits_a } else { &unit.logits_b };
                logits.values().dim()
            };
            for j in 0..dims.0 {
                for i in 0..dims.1 {
                    let base_row = {
                        let unit = &model.adapters.units[unit_idx];
                        let logits = if side == 0 { &unit.logits_a } else { &unit.logits_b };
                        logits.row(j, i).to_owned()
                    };
                    let selection = select_topk(&base_row.view(), k)?;
                    for s in 0..dims.2 {
                        let selected = selection.contains(&s);
                        let analytic = if side == 0 {
                            grads.units[unit_idx].0[[j, i, s]]
                        } else {
                            grads.units[unit_idx].1[[j, i, s]]
                        };
                        if !selected && analytic != 0.0 {
                            report.unselected_exact_zero = false;
                            report.failures.push(format!(
                                "unit {unit_idx} side {side} logit[{j},{i},{s}]: unselected but analytic grad {analytic:e}"
                            ));
                            continue;
                        }
                        let theta = base_row[s];
                        let eps = EPS_REL * theta.abs().max(1.0);
                        // Boundary test: does the selection survive +/-eps?
                        let mut probe = base_row.clone();
                        probe[s] = theta + eps;
                        let up_sel = select_topk(&probe.view(), k)?;
                        probe[s] = theta - eps;
                        let dn_sel = select_topk(&probe.view(), k)?;
                        if up_sel != selection || dn_sel != selection {
                            report.excluded_boundary += 1;
                            continue;
                        }
                        let set = |m: &mut TinyModel<f64>, v: f64| {
                            let unit = &mut m.adapters.units[unit_idx];
                            let logits = if side == 0 {
                                &mut unit.logits_a
                            } else {
                                &mut unit.logits_b
                            };
                            logits.values_mut()[[j, i, s]] = v;
                        };
                        set(&mut work, theta + eps);
                        let up = eval_loss(&work, tokens)?;
                        set(&mut work, theta - eps);
                        let dn = eval_loss(&work, tokens)?;
                        set(&mut work, theta);
                        let fd = (up - dn) / (2.0 * eps);
                        if selected {
                            report.selected_logits += 1;
                            report.compare(analytic, fd, || {
                                format!("unit {unit_idx} side {side} logit[{j},{i},{s}]")
                            });
                        } else if fd.abs() > report.max_unselected_fd {
                            report.max_unselected_fd = fd.abs();
                        }
                    }
                }
            }
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::{
        AdaptedModules, HarnessAdapterConfig, TinyTransformerSpec,
    };
    use crate::harness::task::PermutationCopyTask;
    use crate::variants::{SelectionKind, SelectionPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_model(seed: u64, adapted: AdaptedModules) -> TinyModel<f64> {
        let spec = TinyTransformerSpec {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_factor: 2,
            vocab: 8,
            seq_len: 5,
        };
        let cfg = HarnessAdapterConfig {
            bank_vectors: 6,
            subvector_len: 4,
            rank: 2,
            policy: SelectionPolicy::top_k(2),
            adapted,
        };
        TinyModel::build(spec, cfg, seed).unwrap()
    }

    #[test]
    fn qv_model_gradients_verify() {
        let model = check_model(11, AdaptedModules::Qv);
        let task = PermutationCopyTask::new(8, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = task.sample_batch(3, &mut rng);
        let report = grad_check(&model, &tokens, 1e-6).unwrap();
        assert!(
            report.passed(),
            "failures: {:?}, max err {}",
            report.failures,
            report.max_rel_error
        );
        assert!(report.max_rel_error < 1e-6);
        assert!(report.max_unselected_fd < 1e-10);
        assert!(report.bank_entries > 0 && report.selected_logits > 0);
    }

    #[test]
    fn all_modules_gradients_verify() {
        let model = check_model(13, AdaptedModules::All);
        let task = PermutationCopyTask::new(8, 5, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = task.sample_batch(2, &mut rng);
        let report = grad_check(&model, &tokens, 1e-6).unwrap();
        assert!(
            report.passed(),
            "failures: {:?}, max err {}",
            report.failures,
            report.max_rel_error
        );
    }

    #[test]
    fn stochastic_policy_rejected() {
        let mut model = check_model(11, AdaptedModules::Qv);
        model.adapter_cfg.policy = SelectionPolicy {
            kind: SelectionKind::GumbelSoftmax,
            k: 2,
            tau: 0.5,
            inference_k: 2,
            noise_scale: 0.0,
        };
        let task = PermutationCopyTask::new(8, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = task.sample_batch(2, &mut rng);
        assert!(grad_check(&model, &tokens, 1e-6).is_err());
    }
}
