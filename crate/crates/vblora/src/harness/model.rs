//! Tiny frozen-base transformer with vector-bank adapters.
//!
//! Pre-norm blocks: `x += attn(ln(x))`, `x += ffn(ln(x))`, parameter-free
//! layer norms, causal multi-head attention, ReLU feed-forward, untied
//! output head. Base weights are seeded and never updated; the only
//! trainable state is the shared bank and the per-matrix selection logits.
//!
//! Gradients are hand-derived: the backward pass propagates activation
//! gradients through the frozen network and stops at the adapter parameters.

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::accounting::ModelGeometry;
use crate::bank::{init_bank, VectorBank};
use crate::compose::{assemble_a, assemble_b};
use crate::error::{Error, Result};
use crate::logits::{init_logits, LogitTensor, Side};
use crate::real::Real;
use crate::store::{export, ExportModule, GeometrySnapshot, StoredAdapter};
use crate::tkam::SubVector;
use crate::variants::{select_infer, select_train, SelectionOutcome, SelectionPolicy};

const LN_EPS: f64 = 1e-5;

/// Architecture of the frozen base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyTransformerSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_factor: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

/// Which linear modules carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptedModules {
    /// Query and value projections only.
    Qv,
    /// Query, key, value, output, and both feed-forward matrices.
    All,
}

impl AdaptedModules {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            AdaptedModules::Qv => &["q", "v"],
            AdaptedModules::All => &["q", "k", "v", "o", "up", "down"],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            AdaptedModules::Qv => "qv",
            AdaptedModules::All => "all",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "qv" => Some(AdaptedModules::Qv),
            "all" => Some(AdaptedModules::All),
            _ => None,
        }
    }
}

/// Adapter hyperparameters for the harness model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessAdapterConfig {
    pub bank_vectors: usize,
    pub subvector_len: usize,
    pub rank: usize,
    pub policy: SelectionPolicy,
    pub adapted: AdaptedModules,
}

#[derive(Debug, Clone)]
pub struct BlockWeights<F: Real> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub w_up: Array2<F>,
    pub w_down: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct BaseWeights<F: Real> {
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub blocks: Vec<BlockWeights<F>>,
    pub w_out: Array2<F>,
}

/// One adapted matrix: a pair of logit tensors over the shared bank.
#[derive(Debug, Clone)]
pub struct AdapterUnit<F: Real> {
    pub layer: usize,
    pub name: &'static str,
    pub d_in: usize,
    pub d_out: usize,
    pub logits_a: LogitTensor<F>,
    pub logits_b: LogitTensor<F>,
}

#[derive(Debug, Clone)]
pub struct AdapterState<F: Real> {
    pub bank: VectorBank<F>,
    pub units: Vec<AdapterUnit<F>>,
}

/// Gradients mirroring [`AdapterState`].
#[derive(Debug, Clone)]
pub struct AdapterGrads<F: Real> {
    pub bank: Array2<F>,
    /// Per unit: (A-side logits grad, B-side logits grad).
    pub units: Vec<(Array3<F>, Array3<F>)>,
}

impl<F: Real> AdapterGrads<F> {
    pub fn zeros_like(state: &AdapterState<F>) -> Self {
        Self {
            bank: Array2::zeros(state.bank.values().dim()),
            units: state
                .units
                .iter()
                .map(|u| {
                    (
                        Array3::zeros(u.logits_a.values().dim()),
                        Array3::zeros(u.logits_b.values().dim()),
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyModel<F: Real> {
    pub spec: TinyTransformerSpec,
    pub adapter_cfg: HarnessAdapterConfig,
    pub seed: u64,
    pub base: BaseWeights<F>,
    pub adapters: AdapterState<F>,
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn randn_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("valid normal parameters");
    Array2::from_shape_fn((rows, cols), |_| F::from_f64(rng.sample(dist)))
}

fn module_dims(name: &str, d: usize, ffn: usize) -> (usize, usize) {
    match name {
        "up" => (d, ffn),
        "down" => (ffn, d),
        _ => (d, d),
    }
}

impl<F: Real> TinyModel<F> {
    /// Builds the frozen base and one globally shared bank with per-matrix
    /// logits. All randomness derives from `seed`.
    pub fn build(
        spec: TinyTransformerSpec,
        adapter_cfg: HarnessAdapterConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = spec.hidden;
        let ffn = spec.ffn_factor * spec.hidden;
        let b = adapter_cfg.subvector_len;
        if spec.layers == 0 || spec.vocab < 2 || spec.seq_len < 2 {
            return Err(Error::InvalidArgument(
                "spec needs layers >= 1, vocab >= 2, seq_len >= 2".into(),
            ));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {d} is not divisible by heads {}",
                spec.heads
            )));
        }
        if d % b != 0 || ffn % b != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {d} and ffn width {ffn} must both be divisible by sub-vector length {b}"
            )));
        }
        adapter_cfg.policy.validate(adapter_cfg.bank_vectors)?;
        if adapter_cfg.rank == 0 {
            return Err(Error::InvalidArgument("rank must be positive".into()));
        }

        let mut base_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let inv_sqrt_ffn = 1.0 / (ffn as f64).sqrt();
        let tok_emb = randn_matrix(&mut base_rng, spec.vocab, d, 1.0);
        let pos_emb = randn_matrix(&mut base_rng, spec.seq_len, d, 1.0);
        let blocks = (0..spec.layers)
            .map(|_| BlockWeights {
                wq: randn_matrix(&mut base_rng, d, d, inv_sqrt_d),
                wk: randn_matrix(&mut base_rng, d, d, inv_sqrt_d),
                wv: randn_matrix(&mut base_rng, d, d, inv_sqrt_d),
                wo: randn_matrix(&mut base_rng, d, d, inv_sqrt_d),
                w_up: randn_matrix(&mut base_rng, d, ffn, inv_sqrt_d),
                w_down: randn_matrix(&mut base_rng, ffn, d, inv_sqrt_ffn),
            })
            .collect();
        let w_out = randn_matrix(&mut base_rng, d, spec.vocab, inv_sqrt_d);

        let h = adapter_cfg.bank_vectors;
        let bank = init_bank(h, b, derive_seed(seed, 2))?;
        let mut units = Vec::new();
        for layer in 0..spec.layers {
            for &name in adapter_cfg.adapted.names() {
                let (d_in, d_out) = module_dims(name, d, ffn);
                let unit_idx = units.len() as u64;
                units.push(AdapterUnit {
                    layer,
                    name,
                    d_in,
                    d_out,
                    logits_a: init_logits(
                        d_in,
                        b,
                        adapter_cfg.rank,
                        h,
                        Side::A,
                        derive_seed(seed, 1000 + 2 * unit_idx),
                    )?,
                    logits_b: init_logits(
                        d_out,
                        b,
                        adapter_cfg.rank,
                        h,
                        Side::B,
                        derive_seed(seed, 1000 + 2 * unit_idx + 1),
                    )?,
                });
            }
        }

        Ok(Self {
            spec,
            adapter_cfg,
            seed,
            base: BaseWeights {
                tok_emb,
                pos_emb,
                blocks,
                w_out,
            },
            adapters: AdapterState { bank, units },
        })
    }

    pub fn unit_index(&self, layer: usize, name: &str) -> Option<usize> {
        self.adapters
            .units
            .iter()
            .position(|u| u.layer == layer && u.name == name)
    }

    pub fn num_logit_tensors(&self) -> usize {
        self.adapters.units.len() * 2
    }

    /// Trainable parameter census: bank entries plus every logit entry.
    pub fn num_trainable(&self) -> usize {
        let bank = self.adapters.bank.values().len();
        let logits: usize = self
            .adapters
            .units
            .iter()
            .map(|u| u.logits_a.values().len() + u.logits_b.values().len())
            .sum();
        bank + logits
    }

    /// Total sub-vectors across all units and sides, in the global order
    /// (unit-major, A side before B side, grid block-major).
    pub fn num_subvectors(&self) -> usize {
        self.adapters
            .units
            .iter()
            .map(|u| {
                (u.logits_a.num_blocks() + u.logits_b.num_blocks()) * self.adapter_cfg.rank
            })
            .sum()
    }

    /// Exact checksum over every frozen weight.
    pub fn base_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |arr: &Array2<F>| {
            for &v in arr.iter() {
                hash ^= v.bits();
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(&self.base.tok_emb);
        feed(&self.base.pos_emb);
        for blk in &self.base.blocks {
            feed(&blk.wq);
            feed(&blk.wk);
            feed(&blk.wv);
            feed(&blk.wo);
            feed(&blk.w_up);
            feed(&blk.w_down);
        }
        feed(&self.base.w_out);
        hash
    }

    /// Accounting geometry equivalent to this model's adapted set.
    pub fn geometry(&self) -> ModelGeometry {
        let spec = &self.spec;
        match self.adapter_cfg.adapted {
            AdaptedModules::Qv => ModelGeometry::square(
                spec.layers,
                2,
                spec.hidden,
                spec.heads,
                spec.ffn_factor,
            ),
            AdaptedModules::All => {
                let d = spec.hidden;
                let ffn = spec.ffn_factor * d;
                ModelGeometry::with_module_dims(
                    spec.layers,
                    d,
                    spec.heads,
                    spec.ffn_factor,
                    vec![(d, d), (d, d), (d, d), (d, d), (d, ffn), (ffn, d)],
                )
            }
        }
    }

    /// Deterministic (inference-path) selection of every sub-vector, in the
    /// global sub-vector order.
    pub fn current_selections(&self) -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(self.num_subvectors());
        for unit in &self.adapters.units {
            for logits in [&unit.logits_a, &unit.logits_b] {
                for j in 0..logits.num_blocks() {
                    for i in 0..logits.rank() {
                        let sub = select_infer(
                            &self.adapter_cfg.policy,
                            &logits.row(j, i),
                            &self.adapters.bank,
                        )?;
                        out.push(sub.indices);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl TinyModel<f32> {
    /// Exports the deployment triplet for the current state.
    pub fn export_adapter(&self) -> Result<StoredAdapter> {
        let modules: Vec<ExportModule<'_>> = self
            .adapters
            .units
            .iter()
            .map(|u| ExportModule {
                layer: u.layer,
                name: u.name,
                logits_a: &u.logits_a,
                logits_b: &u.logits_b,
            })
            .collect();
        let k = self
            .adapter_cfg
            .policy
            .inference_support(self.adapter_cfg.bank_vectors);
        export(
            &self.adapters.bank,
            &modules,
            k,
            GeometrySnapshot {
                layers: self.spec.layers,
                hidden: self.spec.hidden,
                heads: self.spec.heads,
                ffn_factor: self.spec.ffn_factor,
                vocab: self.spec.vocab,
                seq_len: self.spec.seq_len,
                base_seed: self.seed,
            },
        )
    }
}

/// Composed factors plus everything backward needs for one adapted matrix.
struct AdaptedCache<F: Real> {
    unit_idx: usize,
    a: Array2<F>,
    b: Array2<F>,
    hid: Array2<F>,
    outcomes_a: Vec<SelectionOutcome<F>>,
    outcomes_b: Vec<SelectionOutcome<F>>,
}

struct LayerTape<F: Real> {
    ln1_hat: Array2<F>,
    ln1_inv: Array1<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
    ln2_hat: Array2<F>,
    ln2_inv: Array1<F>,
    up: Array2<F>,
    act: Array2<F>,
    q_cache: Option<AdaptedCache<F>>,
    k_cache: Option<AdaptedCache<F>>,
    v_cache: Option<AdaptedCache<F>>,
    o_cache: Option<AdaptedCache<F>>,
    up_cache: Option<AdaptedCache<F>>,
    down_cache: Option<AdaptedCache<F>>,
}

/// Output of one forward (and optionally backward) pass.
pub struct StepOutput<F: Real> {
    pub loss: F,
    pub grads: Option<AdapterGrads<F>>,
    /// Per sub-vector (global order): the bank rows selected this step.
    pub selections: Vec<Vec<u32>>,
}

fn layer_norm<F: Real>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let (n, d) = x.dim();
    let dn = F::from_f64(d as f64);
    let eps = F::from_f64(LN_EPS);
    let mut hat = Array2::zeros((n, d));
    let mut inv = Array1::zeros(n);
    for r in 0..n {
        let row = x.row(r);
        let mut mu = F::zero();
        for &v in row.iter() {
            mu += v;
        }
        mu = mu / dn;
        let mut var = F::zero();
        for &v in row.iter() {
            let c = v - mu;
            var += c * c;
        }
        var = var / dn;
        let iv = F::one() / (var + eps).sqrt();
        inv[r] = iv;
        let mut out = hat.row_mut(r);
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - mu) * iv;
        }
    }
    (hat, inv)
}

fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    hat: &Array2<F>,
    inv: &Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let dn = F::from_f64(d as f64);
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let dyr = dy.row(r);
        let hr = hat.row(r);
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for (&g, &hv) in dyr.iter().zip(hr.iter()) {
            m1 += g;
            m2 += g * hv;
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        let iv = inv[r];
        let mut out = dx.row_mut(r);
        for ((o, &g), &hv) in out.iter_mut().zip(dyr.iter()).zip(hr.iter()) {
            *o = iv * (g - m1 - hv * m2);
        }
    }
    dx
}

fn reborrow_rng<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn compose_side<F: Real>(
    logits: &LogitTensor<F>,
    bank: &VectorBank<F>,
    policy: &SelectionPolicy,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(Array2<F>, Vec<SelectionOutcome<F>>)> {
    let (blocks, r, _) = logits.values().dim();
    let mut outcomes = Vec::with_capacity(blocks * r);
    for j in 0..blocks {
        for i in 0..r {
            outcomes.push(select_train(
                policy,
                &logits.row(j, i),
                bank,
                reborrow_rng(rng),
            )?);
        }
    }
    let subs: Vec<SubVector<F>> = outcomes.iter().map(|o| o.sub.clone()).collect();
    let matrix = match logits.side() {
        Side::A => assemble_a(&subs, blocks, r, bank.vector_len()),
        Side::B => assemble_b(&subs, blocks, r, bank.vector_len()),
    };
    Ok((matrix, outcomes))
}

fn linear_forward<F: Real>(
    x: &Array2<F>,
    w: &Array2<F>,
    unit_idx: Option<usize>,
    model: &TinyModel<F>,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(Array2<F>, Option<AdaptedCache<F>>)> {
    let y = x.dot(w);
    let Some(unit_idx) = unit_idx else {
        return Ok((y, None));
    };
    let unit = &model.adapters.units[unit_idx];
    let bank = &model.adapters.bank;
    let policy = &model.adapter_cfg.policy;
    let (a, outcomes_a) = compose_side(&unit.logits_a, bank, policy, rng)?;
    let (b, outcomes_b) = compose_side(&unit.logits_b, bank, policy, rng)?;
    let hid = x.dot(&a.t());
    let y = y + hid.dot(&b.t());
    Ok((
        y,
        Some(AdaptedCache {
            unit_idx,
            a,
            b,
            hid,
            outcomes_a,
            outcomes_b,
        }),
    ))
}

fn distribute_adapter_grads<F: Real>(
    cache: &AdaptedCache<F>,
    grad_a: &Array2<F>,
    grad_b: &Array2<F>,
    bank: &VectorBank<F>,
    grads: &mut AdapterGrads<F>,
) {
    let b_len = bank.vector_len();
    let r = grad_a.nrows();
    let blocks_a = grad_a.ncols() / b_len;
    for j in 0..blocks_a {
        for i in 0..r {
            let grad_u = grad_a.slice(s![i, j * b_len..(j + 1) * b_len]);
            let tk = cache.outcomes_a[j * r + i].backward(&grad_u, bank);
            let mut sl = grads.units[cache.unit_idx].0.slice_mut(s![j, i, ..]);
            sl += &tk.grad_sigma;
            for (idx, row) in &tk.grad_bank_rows {
                let mut br = grads.bank.row_mut(*idx);
                br += row;
            }
        }
    }
    let blocks_b = grad_b.nrows() / b_len;
    for j in 0..blocks_b {
        for i in 0..r {
            let grad_u = grad_b.slice(s![j * b_len..(j + 1) * b_len, i]);
            let tk = cache.outcomes_b[j * r + i].backward(&grad_u, bank);
            let mut sl = grads.units[cache.unit_idx].1.slice_mut(s![j, i, ..]);
            sl += &tk.grad_sigma;
            for (idx, row) in &tk.grad_bank_rows {
                let mut br = grads.bank.row_mut(*idx);
                br += row;
            }
        }
    }
}

fn linear_backward<F: Real>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: &Array2<F>,
    cache: Option<&AdaptedCache<F>>,
    bank: &VectorBank<F>,
    grads: Option<&mut AdapterGrads<F>>,
) -> Array2<F> {
    let mut dx = dy.dot(&w.t());
    if let Some(cache) = cache {
        let p = dy.dot(&cache.b);
        dx = dx + p.dot(&cache.a);
        if let Some(grads) = grads {
            let grad_a = p.t().dot(x);
            let grad_b = dy.t().dot(&cache.hid);
            distribute_adapter_grads(cache, &grad_a, &grad_b, bank, grads);
        }
    }
    dx
}

struct AttentionOut<F: Real> {
    concat: Array2<F>,
    probs: Vec<Array2<F>>,
}

fn attention_forward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> AttentionOut<F> {
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut concat = Array2::zeros((batch * seq, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for bi in 0..batch {
        let rows = s![bi * seq..(bi + 1) * seq, ..];
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let qh = q.slice(rows).slice_move(cols);
            let kh = k.slice(rows).slice_move(cols);
            let vh = v.slice(rows).slice_move(cols);
            let scores = qh.dot(&kh.t()).mapv(|x| x * scale);
            let mut p = Array2::zeros((seq, seq));
            for t in 0..seq {
                // causal: attend to positions <= t
                let mut m = F::neg_infinity();
                for sp in 0..=t {
                    if scores[[t, sp]] > m {
                        m = scores[[t, sp]];
                    }
                }
                let mut z = F::zero();
                for sp in 0..=t {
                    let e = (scores[[t, sp]] - m).exp();
                    p[[t, sp]] = e;
                    z += e;
                }
                for sp in 0..=t {
                    p[[t, sp]] = p[[t, sp]] / z;
                }
            }
            let ctx = p.dot(&vh);
            concat
                .slice_mut(rows)
                .slice_move(cols)
                .assign(&ctx);
            probs.push(p);
        }
    }
    AttentionOut { concat, probs }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    dconcat: &Array2<F>,
    probs: &[Array2<F>],
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros((batch * seq, d));
    let mut dk = Array2::zeros((batch * seq, d));
    let mut dv = Array2::zeros((batch * seq, d));
    for bi in 0..batch {
        let rows = s![bi * seq..(bi + 1) * seq, ..];
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let qh = q.slice(rows).slice_move(cols);
            let kh = k.slice(rows).slice_move(cols);
            let vh = v.slice(rows).slice_move(cols);
            let p = &probs[bi * heads + hd];
            let dctx = dconcat.slice(rows).slice_move(cols);
            let dvh = p.t().dot(&dctx);
            let dp = dctx.dot(&vh.t());
            let mut ds = Array2::zeros((seq, seq));
            for t in 0..seq {
                let mut r = F::zero();
                for sp in 0..=t {
                    r += dp[[t, sp]] * p[[t, sp]];
                }
                for sp in 0..=t {
                    ds[[t, sp]] = p[[t, sp]] * (dp[[t, sp]] - r);
                }
            }
            let dqh = ds.dot(&kh).mapv(|x| x * scale);
            let dkh = ds.t().dot(&qh).mapv(|x| x * scale);
            dq.slice_mut(rows).slice_move(cols).assign(&dqh);
            dk.slice_mut(rows).slice_move(cols).assign(&dkh);
            dv.slice_mut(rows).slice_move(cols).assign(&dvh);
        }
    }
    (dq, dk, dv)
}

/// Mean next-token cross-entropy and its gradient. Position `t` predicts the
/// token at `t + 1`; the final position is unscored.
fn cross_entropy<F: Real>(
    logits: &Array2<F>,
    tokens: &Array2<usize>,
    compute_grads: bool,
) -> (F, Option<Array2<F>>) {
    let (batch, seq) = tokens.dim();
    let vocab = logits.ncols();
    let count = (batch * (seq - 1)) as f64;
    let inv_count = F::from_f64(1.0 / count);
    let mut total = 0.0f64;
    let mut dlogits = if compute_grads {
        Some(Array2::zeros(logits.dim()))
    } else {
        None
    };
    for bi in 0..batch {
        for t in 0..seq - 1 {
            let row_idx = bi * seq + t;
            let target = tokens[[bi, t + 1]];
            let row = logits.row(row_idx);
            let mut m = F::neg_infinity();
            for &x in row.iter() {
                if x > m {
                    m = x;
                }
            }
            let mut z = F::zero();
            for &x in row.iter() {
                z += (x - m).exp();
            }
            let log_z = z.ln() + m;
            total += (log_z - row[target]).to_f64();
            if let Some(dl) = dlogits.as_mut() {
                let mut drow = dl.row_mut(row_idx);
                for c in 0..vocab {
                    let softmax = (row[c] - log_z).exp();
                    drow[c] = softmax * inv_count;
                }
                drow[target] = drow[target] - inv_count;
            }
        }
    }
    (F::from_f64(total / count), dlogits)
}

/// Runs a forward pass (and, when requested, the full backward pass to the
/// adapter parameters) on one batch of token sequences.
pub fn loss_and_backward<F: Real>(
    model: &TinyModel<F>,
    tokens: &Array2<usize>,
    mut rng: Option<&mut dyn RngCore>,
    compute_grads: bool,
) -> Result<StepOutput<F>> {
    let spec = &model.spec;
    let (batch, seq) = tokens.dim();
    if seq != spec.seq_len {
        return Err(Error::InvalidArgument(format!(
            "batch has sequence length {seq}, model expects {}",
            spec.seq_len
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    if tokens.iter().any(|&t| t >= spec.vocab) {
        return Err(Error::InvalidArgument(format!(
            "token id out of range for vocab {}",
            spec.vocab
        )));
    }
    let n = batch * seq;
    let d = spec.hidden;

    // Embedding: token + position.
    let mut x = Array2::zeros((n, d));
    for bi in 0..batch {
        for t in 0..seq {
            let row = bi * seq + t;
            let tok = tokens[[bi, t]];
            let mut out = x.row_mut(row);
            for c in 0..d {
                out[c] = model.base.tok_emb[[tok, c]] + model.base.pos_emb[[t, c]];
            }
        }
    }

    let mut tapes: Vec<LayerTape<F>> = Vec::with_capacity(spec.layers);
    let mut residual = x;
    for layer in 0..spec.layers {
        let blk = &model.base.blocks[layer];
        let (ln1_hat, ln1_inv) = layer_norm(&residual);
        let (q, q_cache) = linear_forward(
            &ln1_hat,
            &blk.wq,
            model.unit_index(layer, "q"),
            model,
            &mut rng,
        )?;
        let (k, k_cache) = linear_forward(
            &ln1_hat,
            &blk.wk,
            model.unit_index(layer, "k"),
            model,
            &mut rng,
        )?;
        let (v, v_cache) = linear_forward(
            &ln1_hat,
            &blk.wv,
            model.unit_index(layer, "v"),
            model,
            &mut rng,
        )?;
        let attn = attention_forward(&q, &k, &v, batch, seq, spec.heads);
        let (attn_out, o_cache) = linear_forward(
            &attn.concat,
            &blk.wo,
            model.unit_index(layer, "o"),
            model,
            &mut rng,
        )?;
        let x_mid = &residual + &attn_out;
        let (ln2_hat, ln2_inv) = layer_norm(&x_mid);
        let (up, up_cache) = linear_forward(
            &ln2_hat,
            &blk.w_up,
            model.unit_index(layer, "up"),
            model,
            &mut rng,
        )?;
        let act = up.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let (down, down_cache) = linear_forward(
            &act,
            &blk.w_down,
            model.unit_index(layer, "down"),
            model,
            &mut rng,
        )?;
        let x_next = &x_mid + &down;
        tapes.push(LayerTape {
            ln1_hat,
            ln1_inv,
            q,
            k,
            v,
            probs: attn.probs,
            concat: attn.concat,
            ln2_hat,
            ln2_inv,
            up,
            act,
            q_cache,
            k_cache,
            v_cache,
            o_cache,
            up_cache,
            down_cache,
        });
        residual = x_next;
    }

    let (lnf_hat, lnf_inv) = layer_norm(&residual);
    let logits = lnf_hat.dot(&model.base.w_out);
    let (loss, dlogits) = cross_entropy(&logits, tokens, compute_grads);

    // Selections in the global sub-vector order, taken from this step's
    // forward composition.
    let mut selections = Vec::with_capacity(model.num_subvectors());
    for (layer, tape) in tapes.iter().enumerate() {
        let caches = [
            &tape.q_cache,
            &tape.k_cache,
            &tape.v_cache,
            &tape.o_cache,
            &tape.up_cache,
            &tape.down_cache,
        ];
        let mut by_unit: Vec<(usize, &AdaptedCache<F>)> = caches
            .iter()
            .filter_map(|c| c.as_ref().map(|c| (c.unit_idx, c)))
            .collect();
        by_unit.sort_by_key(|(idx, _)| *idx);
        debug_assert!(by_unit
            .iter()
            .all(|(idx, _)| model.adapters.units[*idx].layer == layer));
        for (_, cache) in by_unit {
            for outcome in cache.outcomes_a.iter().chain(cache.outcomes_b.iter()) {
                selections.push(outcome.sub.indices.clone());
            }
        }
    }

    if !compute_grads {
        return Ok(StepOutput {
            loss,
            grads: None,
            selections,
        });
    }

    let mut grads = AdapterGrads::zeros_like(&model.adapters);
    let bank = &model.adapters.bank;
    let dlogits = dlogits.expect("gradients requested");
    let d_lnf = dlogits.dot(&model.base.w_out.t());
    let mut dx = layer_norm_backward(&d_lnf, &lnf_hat, &lnf_inv);

    for layer in (0..spec.layers).rev() {
        let blk = &model.base.blocks[layer];
        let tape = &tapes[layer];
        // x_next = x_mid + down(act)
        let d_act = linear_backward(
            &dx,
            &tape.act,
            &blk.w_down,
            tape.down_cache.as_ref(),
            bank,
            Some(&mut grads),
        );
        let d_up = ndarray::Zip::from(&d_act)
            .and(&tape.up)
            .map_collect(|&g, &pre| if pre > F::zero() { g } else { F::zero() });
        let d_ln2 = linear_backward(
            &d_up,
            &tape.ln2_hat,
            &blk.w_up,
            tape.up_cache.as_ref(),
            bank,
            Some(&mut grads),
        );
        let d_xmid = &dx + &layer_norm_backward(&d_ln2, &tape.ln2_hat, &tape.ln2_inv);
        // x_mid = x_in + attn_out(concat)
        let d_concat = linear_backward(
            &d_xmid,
            &tape.concat,
            &blk.wo,
            tape.o_cache.as_ref(),
            bank,
            Some(&mut grads),
        );
        let (dq, dk, dv) = attention_backward(
            &d_concat, &tape.probs, &tape.q, &tape.k, &tape.v, batch, seq, spec.heads,
        );
        let mut d_ln1 = linear_backward(
            &dq,
            &tape.ln1_hat,
            &blk.wq,
            tape.q_cache.as_ref(),
            bank,
            Some(&mut grads),
        );
        d_ln1 = d_ln1
            + linear_backward(
                &dk,
                &tape.ln1_hat,
                &blk.wk,
                tape.k_cache.as_ref(),
                bank,
                Some(&mut grads),
            );
        d_ln1 = d_ln1
            + linear_backward(
                &dv,
                &tape.ln1_hat,
                &blk.wv,
                tape.v_cache.as_ref(),
                bank,
                Some(&mut grads),
            );
        dx = &d_xmid + &layer_norm_backward(&d_ln1, &tape.ln1_hat, &tape.ln1_inv);
    }

    Ok(StepOutput {
        loss,
        grads: Some(grads),
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::PermutationCopyTask;
    use crate::variants::SelectionPolicy;
    use rand::SeedableRng;

    fn tiny_spec() -> TinyTransformerSpec {
        TinyTransformerSpec {
            layers: 2,
            hidden: 64,
            heads: 2,
            ffn_factor: 4,
            vocab: 32,
            seq_len: 16,
        }
    }

    fn adapter_cfg(adapted: AdaptedModules) -> HarnessAdapterConfig {
        HarnessAdapterConfig {
            bank_vectors: 32,
            subvector_len: 16,
            rank: 2,
            policy: SelectionPolicy::top_k(2),
            adapted,
        }
    }

    #[test]
    fn qv_has_eight_logit_tensors() {
        let model =
            TinyModel::<f32>::build(tiny_spec(), adapter_cfg(AdaptedModules::Qv), 0).unwrap();
        assert_eq!(model.num_logit_tensors(), 8);
    }

    #[test]
    fn all_has_twenty_four_logit_tensors() {
        let model =
            TinyModel::<f32>::build(tiny_spec(), adapter_cfg(AdaptedModules::All), 0).unwrap();
        assert_eq!(model.num_logit_tensors(), 24);
        // up/down tensors are sized by the ffn width
        let up = model.unit_index(0, "up").unwrap();
        let unit = &model.adapters.units[up];
        assert_eq!(unit.logits_a.num_blocks(), 64 / 16);
        assert_eq!(unit.logits_b.num_blocks(), 256 / 16);
    }

    #[test]
    fn trainable_census_is_bank_plus_logits() {
        let model =
            TinyModel::<f32>::build(tiny_spec(), adapter_cfg(AdaptedModules::Qv), 0).unwrap();
        let logits: usize = model
            .adapters
            .units
            .iter()
            .map(|u| u.logits_a.values().len() + u.logits_b.values().len())
            .sum();
        assert_eq!(model.num_trainable(), 32 * 16 + logits);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut spec = tiny_spec();
        spec.hidden = 60; // not divisible by b=16
        assert!(TinyModel::<f32>::build(spec, adapter_cfg(AdaptedModules::Qv), 0).is_err());
        let mut spec = tiny_spec();
        spec.heads = 3;
        assert!(TinyModel::<f32>::build(spec, adapter_cfg(AdaptedModules::Qv), 0).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let model =
            TinyModel::<f32>::build(tiny_spec(), adapter_cfg(AdaptedModules::Qv), 7).unwrap();
        let task = PermutationCopyTask::new(32, 16, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let tokens = task.sample_batch(4, &mut rng);
        let out1 = loss_and_backward(&model, &tokens, None, false).unwrap();
        let out2 = loss_and_backward(&model, &tokens, None, false).unwrap();
        assert_eq!(out1.loss, out2.loss);
        assert!(out1.loss.is_finite());
        assert_eq!(out1.selections.len(), model.num_subvectors());
        assert!(out1.selections.iter().all(|s| s.len() == 2));
    }
}
