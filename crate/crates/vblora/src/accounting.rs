//! Trainable- and stored-parameter accounting.
//!
//! Counts cover four methods over the same model geometry: full fine-tuning,
//! LoRA (two factors per adapted matrix), VeRA (frozen shared factors plus
//! two scaling vectors), and the vector-bank method, whose deployment
//! artifact is the triplet (bank, top-k indices, k-1 admixture weights).
//! Packed integer indices are counted in float32-equivalents (bytes / 4).
//!
//! Non-square adapted matrices are counted per dimension: an m x n matrix
//! contributes `r * n/b` A-side and `r * m/b` B-side sub-vectors.

use crate::error::{Error, Result};

/// Geometry of the adapted model.
///
/// `module_dims`, when present, overrides the square `hidden x hidden`
/// assumption with explicit per-module `(d_in, d_out)` pairs; its length is
/// then the number of adapted modules per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGeometry {
    pub layers: usize,
    pub modules_per_layer: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_factor: usize,
    pub module_dims: Option<Vec<(usize, usize)>>,
}

impl ModelGeometry {
    /// All adapted modules are square `hidden x hidden`.
    pub fn square(
        layers: usize,
        modules_per_layer: usize,
        hidden: usize,
        heads: usize,
        ffn_factor: usize,
    ) -> Self {
        Self {
            layers,
            modules_per_layer,
            hidden,
            heads,
            ffn_factor,
            module_dims: None,
        }
    }

    /// Explicit per-module dimensions.
    pub fn with_module_dims(
        layers: usize,
        hidden: usize,
        heads: usize,
        ffn_factor: usize,
        module_dims: Vec<(usize, usize)>,
    ) -> Self {
        Self {
            layers,
            modules_per_layer: module_dims.len(),
            hidden,
            heads,
            ffn_factor,
            module_dims: Some(module_dims),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.modules_per_layer == 0
            || self.hidden == 0
            || self.heads == 0
            || self.ffn_factor == 0
        {
            return Err(Error::InvalidArgument(
                "model geometry fields must be positive".into(),
            ));
        }
        if let Some(dims) = &self.module_dims {
            if dims.len() != self.modules_per_layer {
                return Err(Error::InvalidArgument(format!(
                    "module_dims has {} entries but modules_per_layer is {}",
                    dims.len(),
                    self.modules_per_layer
                )));
            }
            if dims.iter().any(|&(i, o)| i == 0 || o == 0) {
                return Err(Error::InvalidArgument(
                    "module dimensions must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Resolved per-module `(d_in, d_out)` pairs.
    pub fn resolved_dims(&self) -> Vec<(usize, usize)> {
        match &self.module_dims {
            Some(dims) => dims.clone(),
            None => vec![(self.hidden, self.hidden); self.modules_per_layer],
        }
    }

    fn check_divisible(&self, b: usize) -> Result<()> {
        for (i, o) in self.resolved_dims() {
            if i % b != 0 || o % b != 0 {
                return Err(Error::InvalidArgument(format!(
                    "module dimensions {i}x{o} are not divisible by sub-vector length {b}"
                )));
            }
        }
        Ok(())
    }

    /// Sub-vectors per layer across both sides of every adapted matrix:
    /// `sum over modules of r * (d_in + d_out) / b`.
    fn subvectors_per_layer(&self, b: usize, r: usize) -> usize {
        self.resolved_dims()
            .iter()
            .map(|&(i, o)| r * (i + o) / b)
            .sum()
    }
}

/// Parameter counts for one method on one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub method: String,
    pub trainable: u64,
    /// Stored size in float32-equivalents (bytes / 4 for packed integers).
    pub stored_float32_equiv: f64,
    pub breakdown: Vec<(String, f64)>,
    pub note: Option<String>,
}

impl CountReport {
    pub fn stored_millions(&self) -> f64 {
        self.stored_float32_equiv / 1e6
    }
}

/// Full fine-tuning: every adapted-module weight is trainable
/// (`L * M * d^2` for square modules).
pub fn count_full_ft(geom: &ModelGeometry) -> Result<CountReport> {
    geom.validate()?;
    let per_layer: u64 = geom
        .resolved_dims()
        .iter()
        .map(|&(i, o)| (i * o) as u64)
        .sum();
    let total = geom.layers as u64 * per_layer;
    Ok(CountReport {
        method: "full-ft".into(),
        trainable: total,
        stored_float32_equiv: total as f64,
        breakdown: vec![("adapted module weights".into(), total as f64)],
        note: None,
    })
}

/// LoRA: two trainable factors per adapted matrix (`2 * L * M * d * r`
/// for square modules).
pub fn count_lora(geom: &ModelGeometry, r: usize) -> Result<CountReport> {
    geom.validate()?;
    let mut a = 0u64;
    let mut b = 0u64;
    for (i, o) in geom.resolved_dims() {
        a += (r * i) as u64;
        b += (r * o) as u64;
    }
    a *= geom.layers as u64;
    b *= geom.layers as u64;
    Ok(CountReport {
        method: "lora".into(),
        trainable: a + b,
        stored_float32_equiv: (a + b) as f64,
        breakdown: vec![
            ("A factors".into(), a as f64),
            ("B factors".into(), b as f64),
        ],
        note: None,
    })
}

/// VeRA: frozen shared factors, trainable scaling vectors
/// (`L * M * (d + r)` for square modules).
pub fn count_vera(geom: &ModelGeometry, r: usize) -> Result<CountReport> {
    geom.validate()?;
    let mut out_scaling = 0u64;
    for (_, o) in geom.resolved_dims() {
        out_scaling += o as u64;
    }
    out_scaling *= geom.layers as u64;
    let rank_scaling = (geom.layers * geom.modules_per_layer * r) as u64;
    Ok(CountReport {
        method: "vera".into(),
        trainable: out_scaling + rank_scaling,
        stored_float32_equiv: (out_scaling + rank_scaling) as f64,
        breakdown: vec![
            ("output scaling vectors".into(), out_scaling as f64),
            ("rank scaling vectors".into(), rank_scaling as f64),
        ],
        note: None,
    })
}

/// Vector-bank method, training state: the bank plus one length-`h` logit
/// row per sub-vector (`h*b + 2*L*M*r*(d/b)*h` for square modules).
pub fn count_vblora_trainable(
    geom: &ModelGeometry,
    h: usize,
    b: usize,
    r: usize,
) -> Result<CountReport> {
    geom.validate()?;
    if h == 0 || b == 0 || r == 0 {
        return Err(Error::InvalidArgument(format!(
            "bank/rank parameters must be positive, got h={h}, b={b}, r={r}"
        )));
    }
    geom.check_divisible(b)?;
    let bank = (h * b) as u64;
    let subvectors = (geom.layers * geom.subvectors_per_layer(b, r)) as u64;
    let logits = subvectors * h as u64;
    Ok(CountReport {
        method: "vb-lora (trainable)".into(),
        trainable: bank + logits,
        stored_float32_equiv: (bank + logits) as f64,
        breakdown: vec![
            ("bank".into(), bank as f64),
            ("logits".into(), logits as f64),
        ],
        note: None,
    })
}

/// Vector-bank method, deployment triplet: bank, packed top-k indices,
/// and `k - 1` weights per sub-vector, in float32-equivalents.
///
/// With `k = 2` and 1-byte indices this reduces to `h*b + 3*L*M*r*(d/b)`
/// for square modules.
pub fn count_vblora_stored(
    geom: &ModelGeometry,
    h: usize,
    b: usize,
    r: usize,
    k: usize,
    index_bytes: usize,
) -> Result<CountReport> {
    geom.validate()?;
    if h == 0 || b == 0 || r == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "bank/rank parameters must be positive, got h={h}, b={b}, r={r}, k={k}"
        )));
    }
    if k > h {
        return Err(Error::InvalidArgument(format!(
            "top-k count k={k} exceeds bank size h={h}"
        )));
    }
    if !matches!(index_bytes, 1 | 2) {
        return Err(Error::InvalidArgument(format!(
            "index_bytes must be 1 or 2, got {index_bytes}"
        )));
    }
    if index_bytes == 1 && h > 256 {
        return Err(Error::InvalidArgument(format!(
            "1-byte indices require h <= 256, got h={h}"
        )));
    }
    if index_bytes == 2 && h > 65_536 {
        return Err(Error::UnsupportedBankSize(h));
    }
    geom.check_divisible(b)?;
    let trainable = count_vblora_trainable(geom, h, b, r)?.trainable;
    let bank = (h * b) as f64;
    let subvectors = (geom.layers * geom.subvectors_per_layer(b, r)) as f64;
    let indices = subvectors * (k * index_bytes) as f64 / 4.0;
    let weights = subvectors * (k - 1) as f64;
    Ok(CountReport {
        method: "vb-lora (stored)".into(),
        trainable,
        stored_float32_equiv: bank + indices + weights,
        breakdown: vec![
            ("bank".into(), bank),
            ("indices".into(), indices),
            ("weights".into(), weights),
        ],
        note: None,
    })
}

/// Vector-bank hyperparameters bundled with a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VbHyper {
    pub h: usize,
    pub b: usize,
    pub r: usize,
    pub k: usize,
}

impl VbHyper {
    /// 1-byte indices when the bank fits, else 2-byte.
    pub fn index_bytes(&self) -> usize {
        if self.h <= 256 {
            1
        } else {
            2
        }
    }
}

/// A named model configuration for the `count` command.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub geometry: ModelGeometry,
    pub lora_rank: usize,
    pub vera_rank: usize,
    pub vb: VbHyper,
    /// Published full-model parameter count, when known.
    pub model_params: Option<u64>,
    /// Published rounded counts per method, for annotation next to the
    /// formula values.
    pub published: &'static [(&'static str, &'static str)],
}

fn attention_and_ffn_dims(d: usize, ffn: usize) -> Vec<(usize, usize)> {
    vec![
        (d, d),
        (d, d),
        (d, d),
        (d, d),
        (d, ffn),
        (ffn, d),
    ]
}

fn llama_dims(d: usize, ffn: usize) -> Vec<(usize, usize)> {
    // q, k, v, o, gate, up, down: every linear module except the output head.
    vec![
        (d, d),
        (d, d),
        (d, d),
        (d, d),
        (d, ffn),
        (d, ffn),
        (ffn, d),
    ]
}

/// All preset names, in display order.
pub fn preset_names() -> &'static [&'static str] {
    &[
        "roberta-base-qv",
        "roberta-base-all",
        "roberta-large-qv",
        "roberta-large-all",
        "gpt2-medium",
        "gpt2-large",
        "llama2-7b",
        "llama2-13b",
    ]
}

/// Looks up a bundled preset by name.
pub fn preset(name: &str) -> Option<Preset> {
    let p = match name {
        "roberta-base-qv" => Preset {
            name: "roberta-base-qv",
            geometry: ModelGeometry::square(12, 2, 768, 12, 4),
            lora_rank: 8,
            vera_rank: 1024,
            vb: VbHyper {
                h: 90,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(125_000_000),
            published: &[
                ("lora", "0.295M"),
                ("vera", "0.043M"),
                ("vb-lora (stored)", "0.023M"),
            ],
        },
        "roberta-base-all" => Preset {
            name: "roberta-base-all",
            geometry: ModelGeometry::with_module_dims(
                12,
                768,
                12,
                4,
                attention_and_ffn_dims(768, 3072),
            ),
            lora_rank: 8,
            vera_rank: 1024,
            vb: VbHyper {
                h: 90,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(125_000_000),
            published: &[("vera", "0.157M"), ("vb-lora (stored)", "0.027M")],
        },
        "roberta-large-qv" => Preset {
            name: "roberta-large-qv",
            geometry: ModelGeometry::square(24, 2, 1024, 16, 4),
            lora_rank: 8,
            vera_rank: 256,
            vb: VbHyper {
                h: 90,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(355_000_000),
            published: &[
                ("lora", "0.786M"),
                ("vera", "0.061M"),
                ("vb-lora (stored)", "0.024M"),
            ],
        },
        "roberta-large-all" => Preset {
            name: "roberta-large-all",
            geometry: ModelGeometry::with_module_dims(
                24,
                1024,
                16,
                4,
                attention_and_ffn_dims(1024, 4096),
            ),
            lora_rank: 8,
            vera_rank: 256,
            vb: VbHyper {
                h: 90,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(355_000_000),
            published: &[("vera", "0.258M"), ("vb-lora (stored)", "0.033M")],
        },
        "gpt2-medium" => Preset {
            name: "gpt2-medium",
            geometry: ModelGeometry::with_module_dims(
                24,
                1024,
                16,
                4,
                attention_and_ffn_dims(1024, 4096),
            ),
            lora_rank: 4,
            vera_rank: 1024,
            vb: VbHyper {
                h: 256,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(354_920_000),
            published: &[
                ("lora", "0.35M"),
                ("vera", "0.098M"),
                ("vb-lora (stored)", "0.076M"),
            ],
        },
        "gpt2-large" => Preset {
            name: "gpt2-large",
            geometry: ModelGeometry::with_module_dims(
                36,
                1280,
                20,
                4,
                attention_and_ffn_dims(1280, 5120),
            ),
            lora_rank: 4,
            vera_rank: 1024,
            vb: VbHyper {
                h: 350,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(774_030_000),
            published: &[
                ("lora", "0.77M"),
                ("vera", "0.17M"),
                ("vb-lora (stored)", "0.13M"),
            ],
        },
        "llama2-7b" => Preset {
            name: "llama2-7b",
            geometry: ModelGeometry::with_module_dims(
                32,
                4096,
                32,
                4,
                llama_dims(4096, 11008),
            ),
            lora_rank: 64,
            vera_rank: 256,
            vb: VbHyper {
                h: 2048,
                b: 256,
                r: 4,
                k: 2,
            },
            model_params: Some(6_740_000_000),
            published: &[
                ("lora", "159.9M"),
                ("vera", "1.6M"),
                ("vb-lora (stored)", "0.8M"),
            ],
        },
        "llama2-13b" => Preset {
            name: "llama2-13b",
            geometry: ModelGeometry::with_module_dims(
                40,
                5120,
                40,
                4,
                llama_dims(5120, 13824),
            ),
            lora_rank: 64,
            vera_rank: 256,
            vb: VbHyper {
                h: 2048,
                b: 256,
                r: 6,
                k: 2,
            },
            model_params: Some(13_020_000_000),
            published: &[
                ("lora", "250.3M"),
                ("vera", "2.4M"),
                ("vb-lora (stored)", "1.1M"),
            ],
        },
        _ => return None,
    };
    Some(p)
}

impl Preset {
    /// Formula counts for every method, with published values annotated.
    pub fn reports(&self) -> Result<Vec<CountReport>> {
        let mut reports = vec![
            count_full_ft(&self.geometry)?,
            count_lora(&self.geometry, self.lora_rank)?,
            count_vera(&self.geometry, self.vera_rank)?,
            count_vblora_trainable(&self.geometry, self.vb.h, self.vb.b, self.vb.r)?,
            count_vblora_stored(
                &self.geometry,
                self.vb.h,
                self.vb.b,
                self.vb.r,
                self.vb.k,
                self.vb.index_bytes(),
            )?,
        ];
        if let Some(total) = self.model_params {
            let ft = &mut reports[0];
            ft.note = Some(format!(
                "adapted-module weights only; published full model size is {}",
                format_count(total as f64)
            ));
        }
        for report in &mut reports {
            if let Some((_, published)) = self
                .published
                .iter()
                .find(|(m, _)| *m == report.method.as_str())
            {
                let note = format!("published value: {published}");
                report.note = Some(match &report.note {
                    Some(existing) => format!("{existing}; {note}"),
                    None => note,
                });
            }
        }
        Ok(reports)
    }
}

/// Human-readable count with an M suffix above one million.
pub fn format_count(v: f64) -> String {
    if v >= 1e6 {
        format!("{:.3}M", v / 1e6)
    } else {
        format!("{v}")
    }
}
