//! Split-learning-rate training loop.
//!
//! Decoupled-weight-decay adaptive optimizer with two parameter groups (the
//! bank and the logits), linear schedule with warmup, deterministic batch
//! stream, and per-step footprint recording. Base weights are never touched.

use ndarray::{Array2, Array3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::footprint::FootprintLog;
use super::model::{derive_seed, loss_and_backward, AdapterGrads, AdapterState, TinyModel};
use super::task::PermutationCopyTask;

/// Stream tags for deriving independent rng streams from the run seed.
pub(crate) const DATA_STREAM: u64 = 3;
pub(crate) const NOISE_STREAM: u64 = 4;
pub(crate) const TASK_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_bank: f64,
    pub lr_logits: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Footprint recording cadence in steps.
    pub footprint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr_bank: 1e-3,
            lr_logits: 1e-2,
            weight_decay: 0.0,
            warmup_ratio: 0.06,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            footprint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "steps and batch_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lr_bank", self.lr_bank),
            ("lr_logits", self.lr_logits),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    key: name.into(),
                    reason: format!("must be finite and nonnegative, got {v}"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config {
                key: "warmup_ratio".into(),
                reason: format!("must lie in [0, 1), got {}", self.warmup_ratio),
            });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config {
                key: "adam_beta".into(),
                reason: "betas must lie in [0, 1)".into(),
            });
        }
        if self.eps <= 0.0 {
            return Err(Error::Config {
                key: "adam_eps".into(),
                reason: "must be positive".into(),
            });
        }
        if self.footprint_every == 0 {
            return Err(Error::Config {
                key: "footprint_every".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Linear schedule factor for the 0-based step index.
    pub fn schedule(&self, step: usize) -> f64 {
        let warmup = (self.warmup_ratio * self.steps as f64).round() as usize;
        if warmup > 0 && step < warmup {
            (step + 1) as f64 / warmup as f64
        } else if self.steps > warmup {
            (self.steps - step) as f64 / (self.steps - warmup) as f64
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    pub new_selections: usize,
}

pub struct TrainOutput {
    pub metrics: Vec<StepMetric>,
    pub footprint: FootprintLog,
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct AdamW<F: Real> {
    m_bank: Array2<F>,
    v_bank: Array2<F>,
    m_units: Vec<(Array3<F>, Array3<F>)>,
    v_units: Vec<(Array3<F>, Array3<F>)>,
}

impl<F: Real> AdamW<F> {
    fn new(state: &AdapterState<F>) -> Self {
        let zero_units = |_: &()| {
            state
                .units
                .iter()
                .map(|u| {
                    (
                        Array3::zeros(u.logits_a.values().dim()),
                        Array3::zeros(u.logits_b.values().dim()),
                    )
                })
                .collect::<Vec<_>>()
        };
        Self {
            m_bank: Array2::zeros(state.bank.values().dim()),
            v_bank: Array2::zeros(state.bank.values().dim()),
            m_units: zero_units(&()),
            v_units: zero_units(&()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update<D: ndarray::Dimension>(
        param: &mut ndarray::Array<F, D>,
        grad: &ndarray::Array<F, D>,
        m: &mut ndarray::Array<F, D>,
        v: &mut ndarray::Array<F, D>,
        lr: F,
        wd: F,
        cfg: &TrainConfig,
        bias1: F,
        bias2: F,
    ) {
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let eps = F::from_f64(cfg.eps);
        let one = F::one();
        for (((p, &g), mi), vi) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }

    fn step(
        &mut self,
        state: &mut AdapterState<F>,
        grads: &AdapterGrads<F>,
        step: usize,
        cfg: &TrainConfig,
    ) {
        let sched = cfg.schedule(step);
        let lr_bank = F::from_f64(cfg.lr_bank * sched);
        let lr_logits = F::from_f64(cfg.lr_logits * sched);
        let wd = F::from_f64(cfg.weight_decay);
        let t = (step + 1) as i32;
        let bias1 = F::from_f64(1.0 - cfg.beta1.powi(t));
        let bias2 = F::from_f64(1.0 - cfg.beta2.powi(t));
        Self::update(
            state.bank.values_mut(),
            &grads.bank,
            &mut self.m_bank,
            &mut self.v_bank,
            lr_bank,
            wd,
            cfg,
            bias1,
            bias2,
        );
        for (unit_idx, unit) in state.units.iter_mut().enumerate() {
            Self::update(
                unit.logits_a.values_mut(),
                &grads.units[unit_idx].0,
                &mut self.m_units[unit_idx].0,
                &mut self.v_units[unit_idx].0,
                lr_logits,
                wd,
                cfg,
                bias1,
                bias2,
            );
            Self::update(
                unit.logits_b.values_mut(),
                &grads.units[unit_idx].1,
                &mut self.m_units[unit_idx].1,
                &mut self.v_units[unit_idx].1,
                lr_logits,
                wd,
                cfg,
                bias1,
                bias2,
            );
        }
    }
}

/// Trains the adapter parameters in place. Only the bank and logits are
/// updated; the loss trajectory, footprint log, and final state come back.
pub fn train<F: Real>(
    model: &mut TinyModel<F>,
    task: &PermutationCopyTask,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if task.vocab != model.spec.vocab || task.seq_len != model.spec.seq_len {
        return Err(Error::InvalidArgument(format!(
            "task ({}, {}) does not match model spec ({}, {})",
            task.vocab, task.seq_len, model.spec.vocab, model.spec.seq_len
        )));
    }
    let stochastic = model.adapter_cfg.policy.kind.is_stochastic();
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DATA_STREAM));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, NOISE_STREAM));
    let mut footprint = FootprintLog::new(
        model.num_subvectors(),
        model.adapter_cfg.bank_vectors,
    );
    let mut optimizer = AdamW::new(&model.adapters);
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let tokens = task.sample_batch(cfg.batch_size, &mut data_rng);
        let rng_opt: Option<&mut dyn RngCore> = if stochastic {
            Some(&mut noise_rng)
        } else {
            None
        };
        let out = loss_and_backward(model, &tokens, rng_opt, true)?;
        let loss = out.loss.to_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let new_selections = if step % cfg.footprint_every == 0 {
            footprint.record(step, &out.selections)
        } else {
            0
        };
        metrics.push(StepMetric {
            step,
            loss,
            new_selections,
        });
        let grads = out.grads.expect("gradients requested");
        optimizer.step(&mut model.adapters, &grads, step, cfg);
    }

    let initial_loss = metrics.first().map(|m| m.loss).unwrap_or(f64::NAN);
    let final_loss = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    Ok(TrainOutput {
        metrics,
        footprint,
        initial_loss,
        final_loss,
    })
}

/// Writes the loss trajectory as `step,loss,new_selections`.
pub fn write_metrics_csv(path: &std::path::Path, metrics: &[StepMetric]) -> Result<()> {
    let mut out = String::from("step,loss,new_selections\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.step, m.loss, m.new_selections));
    }
    std::fs::write(path, out).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::{
        AdaptedModules, HarnessAdapterConfig, TinyTransformerSpec,
    };
    use crate::variants::SelectionPolicy;

    fn small_model(seed: u64) -> TinyModel<f32> {
        let spec = TinyTransformerSpec {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_factor: 2,
            vocab: 8,
            seq_len: 6,
        };
        let cfg = HarnessAdapterConfig {
            bank_vectors: 6,
            subvector_len: 4,
            rank: 2,
            policy: SelectionPolicy::top_k(2),
            adapted: AdaptedModules::Qv,
        };
        TinyModel::build(spec, cfg, seed).unwrap()
    }

    #[test]
    fn short_run_is_finite_and_frozen() {
        let mut model = small_model(1);
        let before = model.base_checksum();
        let task = PermutationCopyTask::new(8, 6, 2).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &task, &cfg).unwrap();
        assert_eq!(out.metrics.len(), 20);
        assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
        assert_eq!(model.base_checksum(), before);
        assert!(out.footprint.is_monotone());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let task = PermutationCopyTask::new(8, 6, 2).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut m1 = small_model(3);
        let mut m2 = small_model(3);
        let o1 = train(&mut m1, &task, &cfg).unwrap();
        let o2 = train(&mut m2, &task, &cfg).unwrap();
        assert_eq!(o1.metrics, o2.metrics);
    }

    #[test]
    fn zero_learning_rates_freeze_everything() {
        let task = PermutationCopyTask::new(8, 6, 2).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            lr_bank: 0.0,
            lr_logits: 0.0,
            ..TrainConfig::default()
        };
        let mut model = small_model(4);
        let bank_before = model.adapters.bank.values().clone();
        let out = train(&mut model, &task, &cfg).unwrap();
        assert_eq!(model.adapters.bank.values(), &bank_before);
        // no parameter movement, so no new selections after the first record
        let after_first: usize = out.metrics[1..].iter().map(|m| m.new_selections).sum();
        assert_eq!(after_first, 0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.schedule(0) - 0.1).abs() < 1e-12);
        assert!((cfg.schedule(9) - 1.0).abs() < 1e-12);
        assert!(cfg.schedule(50) < 1.0);
        assert!(cfg.schedule(99) > 0.0);
    }
}
