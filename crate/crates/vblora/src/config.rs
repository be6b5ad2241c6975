//! Flat `key = value` run configuration.
//!
//! UTF-8 text, one `key = value` pair per line, `#` comments. Unknown or
//! duplicate keys are errors that name the key. [`RunConfig::snapshot`]
//! serializes the fully resolved configuration (defaults applied) in a form
//! that parses back to the same config; every run writes it next to its
//! outputs.

use std::collections::BTreeSet;
use std::path::Path;

use crate::bank::BANK_INIT_RANGE;
use crate::error::{Error, Result};
use crate::harness::{
    AdaptedModules, HarnessAdapterConfig, PermutationCopyTask, TinyTransformerSpec, TrainConfig,
};
use crate::logits::LOGIT_INIT_STD;
use crate::variants::{SelectionKind, SelectionPolicy};

/// Everything a training / export / gradient-check run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_factor: usize,
    pub vocab: usize,
    pub seq_len: usize,

    pub bank_size: usize,
    pub subvector_len: usize,
    pub rank: usize,
    pub k: usize,
    pub selection: SelectionKind,
    pub tau: f64,
    pub inference_k: usize,
    pub noise_scale: f64,
    pub adapted_modules: AdaptedModules,

    pub steps: usize,
    pub batch_size: usize,
    pub lr_bank: f64,
    pub lr_logits: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub footprint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 2,
            ffn_factor: 4,
            vocab: 32,
            seq_len: 16,
            bank_size: 32,
            subvector_len: 16,
            rank: 2,
            k: 2,
            selection: SelectionKind::TopK,
            tau: 1.0 / 3.0,
            inference_k: 1,
            noise_scale: 1.0,
            adapted_modules: AdaptedModules::All,
            steps: 500,
            batch_size: 16,
            lr_bank: 1e-3,
            lr_logits: 1e-2,
            weight_decay: 0.0,
            warmup_ratio: 0.06,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            footprint_every: 1,
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(
                    line,
                    format!("line {}: expected `key = value`", lineno + 1),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(config_err(key, "duplicate key"));
            }
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "layers" => self.layers = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "ffn_factor" => self.ffn_factor = parse_num(key, value)?,
            "vocab" => self.vocab = parse_num(key, value)?,
            "seq_len" => self.seq_len = parse_num(key, value)?,
            "bank_size" => self.bank_size = parse_num(key, value)?,
            "subvector_len" => self.subvector_len = parse_num(key, value)?,
            "rank" => self.rank = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "selection" => {
                self.selection = SelectionKind::from_key(value).ok_or_else(|| {
                    config_err(
                        key,
                        format!(
                            "unknown selection `{value}` (expected topk|noisy_topk|gs|st_gs|select_all)"
                        ),
                    )
                })?
            }
            "tau" => self.tau = parse_num(key, value)?,
            "inference_k" => self.inference_k = parse_num(key, value)?,
            "noise_scale" => self.noise_scale = parse_num(key, value)?,
            "adapted_modules" => {
                self.adapted_modules = AdaptedModules::from_key(value).ok_or_else(|| {
                    config_err(key, format!("unknown module set `{value}` (expected qv|all)"))
                })?
            }
            "steps" => self.steps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr_bank" => self.lr_bank = parse_num(key, value)?,
            "lr_logits" => self.lr_logits = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "footprint_every" => self.footprint_every = parse_num(key, value)?,
            // Initialization constants are recorded in every snapshot; they
            // are accepted back only at their built-in values.
            "bank_init_range" => {
                let v: f64 = parse_num(key, value)?;
                if v != BANK_INIT_RANGE {
                    return Err(config_err(
                        key,
                        format!("fixed at {BANK_INIT_RANGE}, got {v}"),
                    ));
                }
            }
            "logits_init_std" => {
                let v: f64 = parse_num(key, value)?;
                if v != LOGIT_INIT_STD {
                    return Err(config_err(key, format!("fixed at {LOGIT_INIT_STD}, got {v}")));
                }
            }
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Fully resolved `key = value` snapshot, parseable by [`RunConfig::parse`].
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("layers", self.layers.to_string());
        push("hidden", self.hidden.to_string());
        push("heads", self.heads.to_string());
        push("ffn_factor", self.ffn_factor.to_string());
        push("vocab", self.vocab.to_string());
        push("seq_len", self.seq_len.to_string());
        push("bank_size", self.bank_size.to_string());
        push("subvector_len", self.subvector_len.to_string());
        push("rank", self.rank.to_string());
        push("k", self.k.to_string());
        push("selection", self.selection.key().to_string());
        push("tau", self.tau.to_string());
        push("inference_k", self.inference_k.to_string());
        push("noise_scale", self.noise_scale.to_string());
        push("adapted_modules", self.adapted_modules.key().to_string());
        push("steps", self.steps.to_string());
        push("batch_size", self.batch_size.to_string());
        push("lr_bank", self.lr_bank.to_string());
        push("lr_logits", self.lr_logits.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("warmup_ratio", self.warmup_ratio.to_string());
        push("adam_beta1", self.adam_beta1.to_string());
        push("adam_beta2", self.adam_beta2.to_string());
        push("adam_eps", self.adam_eps.to_string());
        push("seed", self.seed.to_string());
        push("footprint_every", self.footprint_every.to_string());
        push("bank_init_range", BANK_INIT_RANGE.to_string());
        push("logits_init_std", LOGIT_INIT_STD.to_string());
        s
    }

    pub fn spec(&self) -> TinyTransformerSpec {
        TinyTransformerSpec {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_factor: self.ffn_factor,
            vocab: self.vocab,
            seq_len: self.seq_len,
        }
    }

    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            kind: self.selection,
            k: self.k,
            tau: self.tau,
            inference_k: self.inference_k,
            noise_scale: self.noise_scale,
        }
    }

    pub fn adapter_config(&self) -> HarnessAdapterConfig {
        HarnessAdapterConfig {
            bank_vectors: self.bank_size,
            subvector_len: self.subvector_len,
            rank: self.rank,
            policy: self.policy(),
            adapted: self.adapted_modules,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr_bank: self.lr_bank,
            lr_logits: self.lr_logits,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            seed: self.seed,
            footprint_every: self.footprint_every,
        }
    }

    pub fn task(&self) -> Result<PermutationCopyTask> {
        PermutationCopyTask::new(self.vocab, self.seq_len, crate::harness::task_seed(self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = RunConfig::default();
        let snap = cfg.snapshot();
        let parsed = RunConfig::parse(&snap).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "
            # adapter
            bank_size = 8
            selection = gs   # gumbel
            tau = 0.5
            seed = 42
        ";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.bank_size, 8);
        assert_eq!(cfg.selection, SelectionKind::GumbelSoftmax);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.seed, 42);
        // untouched keys keep defaults
        assert_eq!(cfg.steps, 500);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("bank_sizes = 8").unwrap_err();
        assert!(err.to_string().contains("bank_sizes"), "{err}");
        let err = RunConfig::parse("steps = many").unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
        let err = RunConfig::parse("steps = 1\nsteps = 2").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = RunConfig::parse("selection = random").unwrap_err();
        assert!(err.to_string().contains("selection"), "{err}");
    }

    #[test]
    fn init_constants_must_match() {
        assert!(RunConfig::parse("bank_init_range = 0.02").is_ok());
        assert!(RunConfig::parse("bank_init_range = 0.05").is_err());
        assert!(RunConfig::parse("logits_init_std = 0.01").is_ok());
        assert!(RunConfig::parse("logits_init_std = 0.1").is_err());
    }
}
