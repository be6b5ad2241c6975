//! The `.vbla` adapter container.
//!
//! The deployment artifact keeps the bank, the selected top-k indices, and
//! `k - 1` admixture weights per sub-vector; the selection logits are
//! discarded. Layout (all little-endian):
//!
//! ```text
//! magic "VBLA" | version u16
//! h u32 | b u32 | k u16 | r u16 | index_width u8 | flags u8
//! layers u32 | hidden u32 | heads u32 | ffn_factor u32 | vocab u32 | seq_len u32
//! base_seed u64 | manifest_len u32
//! manifest entries: layer u32 | name_len u16 | name utf-8 | side u8 | rank u16 | d_dim u32
//! bank: h*b f32, row-major
//! per manifest entry: index block (num_sv * k ints), then weight block
//!   (num_sv * (k-1) f32); sub-vectors in grid order (block-major, then rank),
//!   indices and weights in descending-logit order with the smallest-logit
//!   weight dropped
//! crc32 u32 over every preceding byte
//! ```
//!
//! Reconstruction recovers the dropped weight as `1 - sum(stored)`, which is
//! bit-exact against the training-time composition because the admixture
//! itself closes its last weight the same way.

use ndarray::Array2;

use crate::bank::VectorBank;
use crate::compose::{assemble_a, assemble_b, ComposedFactors, Provenance};
use crate::error::{Error, ParseError, Result};
use crate::logits::{LogitTensor, Side};

use crate::tkam::{mix_rows, topk_admix, SubVector};

pub const MAGIC: [u8; 4] = *b"VBLA";
pub const FORMAT_VERSION: u16 = 1;

/// Model geometry captured alongside the adapter so that merge and
/// reconstruction need no side channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometrySnapshot {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_factor: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub base_seed: u64,
}

/// Header fields of a stored adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSnapshot {
    pub bank_vectors: usize,
    pub subvector_len: usize,
    pub rank: usize,
    pub top_k: usize,
    pub index_width: usize,
    pub geometry: GeometrySnapshot,
}

/// One side of one adapted matrix in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleEntry {
    pub layer: u32,
    pub name: String,
    pub side: Side,
    pub rank: u16,
    pub d_dim: u32,
}

impl ModuleEntry {
    pub fn num_blocks(&self, b: usize) -> usize {
        self.d_dim as usize / b
    }

    pub fn num_subvectors(&self, b: usize) -> usize {
        self.num_blocks(b) * self.rank as usize
    }
}

/// The stored triplet plus its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredAdapter {
    pub snapshot: AdapterSnapshot,
    pub bank: Array2<f32>,
    pub manifest: Vec<ModuleEntry>,
    /// Per manifest entry: `num_sv * k` indices, sub-vector-major.
    pub indices: Vec<Vec<u32>>,
    /// Per manifest entry: `num_sv * (k-1)` weights, sub-vector-major.
    pub weights: Vec<Vec<f32>>,
}

/// Borrowed training state for one adapted matrix at export time.
pub struct ExportModule<'a> {
    pub layer: usize,
    pub name: &'a str,
    pub logits_a: &'a LogitTensor<f32>,
    pub logits_b: &'a LogitTensor<f32>,
}

/// Index byte width for a bank of `h` vectors: 1 when it fits in a byte.
pub fn index_width_for(h: usize) -> Result<usize> {
    if h <= 256 {
        Ok(1)
    } else if h <= 65_536 {
        Ok(2)
    } else {
        Err(Error::UnsupportedBankSize(h))
    }
}

fn push_side_entries(
    logits: &LogitTensor<f32>,
    bank: &VectorBank<f32>,
    k: usize,
    indices: &mut Vec<u32>,
    weights: &mut Vec<f32>,
) -> Result<()> {
    for j in 0..logits.num_blocks() {
        for i in 0..logits.rank() {
            let sub = topk_admix(&logits.row(j, i), bank, k)?;
            indices.extend_from_slice(&sub.indices);
            weights.extend_from_slice(&sub.weights[..k - 1]);
        }
    }
    Ok(())
}

/// Discards the logits: runs the canonical top-k admixture over every
/// sub-vector and keeps only indices and the first `k - 1` weights.
pub fn export(
    bank: &VectorBank<f32>,
    modules: &[ExportModule<'_>],
    k: usize,
    geometry: GeometrySnapshot,
) -> Result<StoredAdapter> {
    let h = bank.num_vectors();
    let b = bank.vector_len();
    let index_width = index_width_for(h)?;
    let rank = modules.first().map(|m| m.logits_a.rank()).unwrap_or(0);

    let mut manifest = Vec::new();
    let mut all_indices = Vec::new();
    let mut all_weights = Vec::new();
    for module in modules {
        for (logits, side) in [(module.logits_a, Side::A), (module.logits_b, Side::B)] {
            if logits.bank_size() != h {
                return Err(Error::InvalidArgument(format!(
                    "module {} side {side}: logits select over {} rows, bank has {h}",
                    module.name,
                    logits.bank_size()
                )));
            }
            let entry = ModuleEntry {
                layer: module.layer as u32,
                name: module.name.to_string(),
                side,
                rank: logits.rank() as u16,
                d_dim: (logits.num_blocks() * b) as u32,
            };
            let mut indices = Vec::with_capacity(entry.num_subvectors(b) * k);
            let mut weights = Vec::with_capacity(entry.num_subvectors(b) * (k - 1));
            push_side_entries(logits, bank, k, &mut indices, &mut weights)?;
            manifest.push(entry);
            all_indices.push(indices);
            all_weights.push(weights);
        }
    }

    let adapter = StoredAdapter {
        snapshot: AdapterSnapshot {
            bank_vectors: h,
            subvector_len: b,
            rank,
            top_k: k,
            index_width,
            geometry,
        },
        bank: bank.values().clone(),
        manifest,
        indices: all_indices,
        weights: all_weights,
    };
    adapter.validate()?;
    Ok(adapter)
}

/// A module's factors rebuilt from the triplet, without any logits.
#[derive(Debug, Clone)]
pub struct ReconstructedModule {
    pub layer: u32,
    pub name: String,
    pub factors: ComposedFactors<f32>,
}

impl StoredAdapter {
    pub fn validate(&self) -> Result<()> {
        let h = self.snapshot.bank_vectors;
        let b = self.snapshot.subvector_len;
        let k = self.snapshot.top_k;
        if self.bank.nrows() != h || self.bank.ncols() != b {
            return Err(ParseError::InvalidAdapter(format!(
                "bank is {}x{} but the header says {h}x{b}",
                self.bank.nrows(),
                self.bank.ncols()
            ))
            .into());
        }
        if self.manifest.len() != self.indices.len() || self.manifest.len() != self.weights.len() {
            return Err(ParseError::InvalidAdapter(
                "manifest and payload block counts disagree".into(),
            )
            .into());
        }
        let mut subvector = 0usize;
        for ((entry, indices), weights) in self
            .manifest
            .iter()
            .zip(&self.indices)
            .zip(&self.weights)
        {
            if entry.d_dim as usize % b != 0 {
                return Err(ParseError::InvalidAdapter(format!(
                    "module {} side {}: dimension {} is not divisible by b={b}",
                    entry.name, entry.side, entry.d_dim
                ))
                .into());
            }
            let num_sv = entry.num_subvectors(b);
            if indices.len() != num_sv * k || weights.len() != num_sv * (k - 1) {
                return Err(ParseError::InvalidAdapter(format!(
                    "module {} side {}: payload sizes do not match {num_sv} sub-vectors",
                    entry.name, entry.side
                ))
                .into());
            }
            for sv in 0..num_sv {
                let sel = &indices[sv * k..(sv + 1) * k];
                for &idx in sel {
                    if idx as usize >= h {
                        return Err(ParseError::CorruptIndex {
                            index: idx,
                            subvector,
                            bank_size: h,
                        }
                        .into());
                    }
                }
                let mut sorted: Vec<u32> = sel.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != k {
                    return Err(ParseError::InvalidAdapter(format!(
                        "sub-vector {subvector}: selected indices are not distinct"
                    ))
                    .into());
                }
                let stored = &weights[sv * (k - 1)..(sv + 1) * (k - 1)];
                if stored.iter().any(|w| !(0.0..=1.0).contains(w)) {
                    return Err(ParseError::InvalidAdapter(format!(
                        "sub-vector {subvector}: stored weight outside [0, 1]"
                    ))
                    .into());
                }
                let implied = 1.0 - stored.iter().copied().sum::<f32>();
                if !(-1e-6..=1.0 + 1e-6).contains(&implied) {
                    return Err(ParseError::InvalidAdapter(format!(
                        "sub-vector {subvector}: implied weight {implied} outside [0, 1]"
                    ))
                    .into());
                }
                subvector += 1;
            }
        }
        Ok(())
    }

    /// Bytes of the bank, index, and weight blocks; excludes magic, version,
    /// header, manifest, and checksum.
    pub fn payload_bytes(&self) -> usize {
        let bank = self.bank.len() * 4;
        let iw = self.snapshot.index_width;
        let idx: usize = self.indices.iter().map(|v| v.len() * iw).sum();
        let w: usize = self.weights.iter().map(|v| v.len() * 4).sum();
        bank + idx + w
    }

    /// Serialized overhead: total bytes minus payload and checksum.
    pub fn header_bytes(&self) -> usize {
        self.serialize().len() - self.payload_bytes() - 4
    }

    pub fn serialize(&self) -> Vec<u8> {
        let snap = &self.snapshot;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(snap.bank_vectors as u32).to_le_bytes());
        out.extend_from_slice(&(snap.subvector_len as u32).to_le_bytes());
        out.extend_from_slice(&(snap.top_k as u16).to_le_bytes());
        out.extend_from_slice(&(snap.rank as u16).to_le_bytes());
        out.push(snap.index_width as u8);
        out.push(0u8); // flags, reserved
        let g = &snap.geometry;
        out.extend_from_slice(&(g.layers as u32).to_le_bytes());
        out.extend_from_slice(&(g.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(g.heads as u32).to_le_bytes());
        out.extend_from_slice(&(g.ffn_factor as u32).to_le_bytes());
        out.extend_from_slice(&(g.vocab as u32).to_le_bytes());
        out.extend_from_slice(&(g.seq_len as u32).to_le_bytes());
        out.extend_from_slice(&g.base_seed.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for entry in &self.manifest {
            out.extend_from_slice(&entry.layer.to_le_bytes());
            out.extend_from_slice(&(entry.name.len() as u16).to_le_bytes());
            out.extend_from_slice(entry.name.as_bytes());
            out.push(entry.side.tag());
            out.extend_from_slice(&entry.rank.to_le_bytes());
            out.extend_from_slice(&entry.d_dim.to_le_bytes());
        }
        for &v in self.bank.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (indices, weights) in self.indices.iter().zip(&self.weights) {
            for &idx in indices {
                match self.snapshot.index_width {
                    1 => out.push(idx as u8),
                    _ => out.extend_from_slice(&(idx as u16).to_le_bytes()),
                }
            }
            for &w in weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take_array("magic")?;
        if magic != MAGIC {
            return Err(ParseError::BadMagic { found: magic }.into());
        }
        let version = r.take_u16("version")?;
        if version != FORMAT_VERSION {
            return Err(ParseError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        // Integrity first: every later parse step can then trust the bytes.
        if bytes.len() < 10 {
            return Err(ParseError::Truncated {
                what: "checksum",
                needed: 4,
                remaining: bytes.len().saturating_sub(6),
            }
            .into());
        }
        let payload = &bytes[..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored_crc != computed {
            return Err(ParseError::CrcMismatch {
                stored: stored_crc,
                computed,
            }
            .into());
        }

        let h = r.take_u32("bank size")? as usize;
        let b = r.take_u32("sub-vector length")? as usize;
        let k = r.take_u16("top-k count")? as usize;
        let rank = r.take_u16("rank")? as usize;
        let index_width = r.take_u8("index width")? as usize;
        let _flags = r.take_u8("flags")?;
        if !matches!(index_width, 1 | 2) {
            return Err(ParseError::InvalidAdapter(format!(
                "index width must be 1 or 2, found {index_width}"
            ))
            .into());
        }
        if h == 0 || b == 0 || k == 0 {
            return Err(ParseError::InvalidAdapter(format!(
                "degenerate header: h={h}, b={b}, k={k}"
            ))
            .into());
        }
        let geometry = GeometrySnapshot {
            layers: r.take_u32("layers")? as usize,
            hidden: r.take_u32("hidden")? as usize,
            heads: r.take_u32("heads")? as usize,
            ffn_factor: r.take_u32("ffn factor")? as usize,
            vocab: r.take_u32("vocab")? as usize,
            seq_len: r.take_u32("sequence length")? as usize,
            base_seed: r.take_u64("base seed")?,
        };
        let manifest_len = r.take_u32("manifest length")? as usize;
        let mut manifest = Vec::with_capacity(manifest_len.min(1024));
        for _ in 0..manifest_len {
            let layer = r.take_u32("manifest layer")?;
            let name_len = r.take_u16("module name length")? as usize;
            let name_bytes = r.take_slice(name_len, "module name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| {
                Error::from(ParseError::InvalidAdapter("module name is not utf-8".into()))
            })?;
            let side_tag = r.take_u8("module side")?;
            let side = Side::from_tag(side_tag).ok_or_else(|| {
                Error::from(ParseError::InvalidAdapter(format!(
                    "unknown side tag {side_tag}"
                )))
            })?;
            let entry_rank = r.take_u16("module rank")?;
            let d_dim = r.take_u32("module dimension")?;
            manifest.push(ModuleEntry {
                layer,
                name,
                side,
                rank: entry_rank,
                d_dim,
            });
        }
        let mut bank = Array2::zeros((h, b));
        for v in bank.iter_mut() {
            *v = r.take_f32("bank value")?;
        }
        let mut all_indices = Vec::with_capacity(manifest.len());
        let mut all_weights = Vec::with_capacity(manifest.len());
        for entry in &manifest {
            if entry.d_dim as usize % b != 0 {
                return Err(ParseError::InvalidAdapter(format!(
                    "module {} side {}: dimension {} is not divisible by b={b}",
                    entry.name, entry.side, entry.d_dim
                ))
                .into());
            }
            let num_sv = entry.num_subvectors(b);
            let mut indices = Vec::with_capacity(num_sv * k);
            for _ in 0..num_sv * k {
                let idx = match index_width {
                    1 => u32::from(r.take_u8("index")?),
                    _ => u32::from(r.take_u16("index")?),
                };
                indices.push(idx);
            }
            let mut weights = Vec::with_capacity(num_sv * (k - 1));
            for _ in 0..num_sv * (k - 1) {
                weights.push(r.take_f32("weight")?);
            }
            all_indices.push(indices);
            all_weights.push(weights);
        }
        r.expect_remaining(4, "checksum")?;

        let adapter = StoredAdapter {
            snapshot: AdapterSnapshot {
                bank_vectors: h,
                subvector_len: b,
                rank,
                top_k: k,
                index_width,
                geometry,
            },
            bank,
            manifest,
            indices: all_indices,
            weights: all_weights,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    /// Sub-vector values for one manifest entry, in grid order.
    fn entry_subvectors(&self, entry_idx: usize) -> Vec<SubVector<f32>> {
        let entry = &self.manifest[entry_idx];
        let b = self.snapshot.subvector_len;
        let k = self.snapshot.top_k;
        let bank = VectorBank::from_values(self.bank.clone()).expect("validated bank");
        let num_sv = entry.num_subvectors(b);
        let mut subs = Vec::with_capacity(num_sv);
        for sv in 0..num_sv {
            let indices = &self.indices[entry_idx][sv * k..(sv + 1) * k];
            let stored = &self.weights[entry_idx][sv * (k - 1)..(sv + 1) * (k - 1)];
            let mut weights: Vec<f32> = stored.to_vec();
            // Same closure rule as the admixture itself, so values match
            // the training-time composition bit for bit.
            let partial: f32 = weights.iter().copied().sum();
            weights.push(1.0 - partial);
            let values = mix_rows(&bank, indices, &weights);
            subs.push(SubVector {
                values,
                indices: indices.to_vec(),
                weights,
            });
        }
        subs
    }

    /// Rebuilds every module's factors from the triplet.
    pub fn reconstruct(&self) -> Result<Vec<ReconstructedModule>> {
        self.validate()?;
        let b = self.snapshot.subvector_len;
        let mut grouped: Vec<((u32, String), Option<usize>, Option<usize>)> = Vec::new();
        for (idx, entry) in self.manifest.iter().enumerate() {
            let key = (entry.layer, entry.name.clone());
            let slot = match grouped.iter_mut().find(|(k, _, _)| *k == key) {
                Some(slot) => slot,
                None => {
                    grouped.push((key, None, None));
                    grouped.last_mut().unwrap()
                }
            };
            let target = match entry.side {
                Side::A => &mut slot.1,
                Side::B => &mut slot.2,
            };
            if target.is_some() {
                return Err(ParseError::InvalidAdapter(format!(
                    "duplicate {} entry for layer {} module {}",
                    entry.side, entry.layer, entry.name
                ))
                .into());
            }
            *target = Some(idx);
        }
        let mut modules = Vec::with_capacity(grouped.len());
        for ((layer, name), a_idx, b_idx) in grouped {
            let (a_idx, b_idx) = match (a_idx, b_idx) {
                (Some(a), Some(bb)) => (a, bb),
                _ => {
                    return Err(ParseError::InvalidAdapter(format!(
                        "layer {layer} module {name} is missing one side"
                    ))
                    .into())
                }
            };
            let a_entry = &self.manifest[a_idx];
            let b_entry = &self.manifest[b_idx];
            if a_entry.rank != b_entry.rank {
                return Err(ParseError::InvalidAdapter(format!(
                    "layer {layer} module {name}: rank differs between sides"
                ))
                .into());
            }
            let rank = a_entry.rank as usize;
            let a = assemble_a(
                &self.entry_subvectors(a_idx),
                a_entry.num_blocks(b),
                rank,
                b,
            );
            let bm = assemble_b(
                &self.entry_subvectors(b_idx),
                b_entry.num_blocks(b),
                rank,
                b,
            );
            let factors = ComposedFactors::new(
                a,
                bm,
                Provenance {
                    bank_vectors: self.snapshot.bank_vectors,
                    subvector_len: b,
                    top_k: self.snapshot.top_k,
                },
            )?;
            modules.push(ReconstructedModule {
                layer,
                name,
                factors,
            });
        }
        Ok(modules)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take_slice(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(ParseError::Truncated {
                what,
                needed: n,
                remaining,
            }
            .into());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take_slice(N, what)?.try_into().unwrap())
    }

    fn take_u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take_slice(1, what)?[0])
    }

    fn take_u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take_array(what)?))
    }

    fn take_u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_array(what)?))
    }

    fn take_u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take_array(what)?))
    }

    fn take_f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take_array(what)?))
    }

    fn expect_remaining(&self, n: usize, what: &'static str) -> Result<()> {
        let remaining = self.bytes.len() - self.pos;
        if remaining != n {
            return Err(ParseError::Truncated {
                what,
                needed: n,
                remaining,
            }
            .into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::init_bank;
    use crate::compose::{compose_a, compose_b};
    use crate::logits::init_logits;
    use ndarray::array;

    fn empty_geometry() -> GeometrySnapshot {
        GeometrySnapshot {
            layers: 0,
            hidden: 0,
            heads: 0,
            ffn_factor: 0,
            vocab: 0,
            seq_len: 0,
            base_seed: 0,
        }
    }

    fn small_adapter(seed: u64) -> StoredAdapter {
        let bank = init_bank::<f32>(5, 4, seed).unwrap();
        let la = init_logits::<f32>(8, 4, 2, 5, Side::A, seed + 1).unwrap();
        let lb = init_logits::<f32>(12, 4, 2, 5, Side::B, seed + 2).unwrap();
        let modules = [ExportModule {
            layer: 0,
            name: "q",
            logits_a: &la,
            logits_b: &lb,
        }];
        export(&bank, &modules, 2, empty_geometry()).unwrap()
    }

    #[test]
    fn export_stores_k_minus_one_weights() {
        let bank = VectorBank::from_values(array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let mut values = ndarray::Array3::zeros((1, 1, 3));
        values[[0, 0, 0]] = 2.0;
        values[[0, 0, 1]] = 1.0;
        let logits = LogitTensor::from_values(values.clone(), Side::A);
        let logits_b = LogitTensor::from_values(values, Side::B);
        let modules = [ExportModule {
            layer: 0,
            name: "q",
            logits_a: &logits,
            logits_b: &logits_b,
        }];
        let adapter = export(&bank, &modules, 2, empty_geometry()).unwrap();
        assert_eq!(adapter.indices[0], vec![0, 1]);
        assert_eq!(adapter.weights[0].len(), 1);
        assert!((adapter.weights[0][0] - 0.7310586).abs() < 1e-6);
    }

    #[test]
    fn k1_stores_no_weights() {
        let bank = init_bank::<f32>(4, 2, 3).unwrap();
        let la = init_logits::<f32>(4, 2, 1, 4, Side::A, 0).unwrap();
        let lb = init_logits::<f32>(4, 2, 1, 4, Side::B, 1).unwrap();
        let modules = [ExportModule {
            layer: 0,
            name: "v",
            logits_a: &la,
            logits_b: &lb,
        }];
        let adapter = export(&bank, &modules, 1, empty_geometry()).unwrap();
        assert!(adapter.weights.iter().all(|w| w.is_empty()));
        let bytes = adapter.serialize();
        let back = StoredAdapter::deserialize(&bytes).unwrap();
        assert_eq!(adapter, back);
    }

    #[test]
    fn empty_manifest_round_trips() {
        let bank = init_bank::<f32>(3, 2, 9).unwrap();
        let adapter = export(&bank, &[], 2, empty_geometry()).unwrap();
        let bytes = adapter.serialize();
        let back = StoredAdapter::deserialize(&bytes).unwrap();
        assert_eq!(adapter, back);
    }

    #[test]
    fn round_trip_is_field_identical() {
        let adapter = small_adapter(1);
        let bytes = adapter.serialize();
        let back = StoredAdapter::deserialize(&bytes).unwrap();
        assert_eq!(adapter, back);
    }

    #[test]
    fn reconstruction_matches_live_composition_bit_for_bit() {
        let bank = init_bank::<f32>(6, 4, 21).unwrap();
        let la = init_logits::<f32>(8, 4, 2, 6, Side::A, 22).unwrap();
        let lb = init_logits::<f32>(8, 4, 2, 6, Side::B, 23).unwrap();
        let modules = [ExportModule {
            layer: 0,
            name: "q",
            logits_a: &la,
            logits_b: &lb,
        }];
        let adapter = export(&bank, &modules, 2, empty_geometry()).unwrap();
        let rebuilt = adapter.reconstruct().unwrap();
        assert_eq!(rebuilt.len(), 1);
        let live_a = compose_a(&la, &bank, 2).unwrap();
        let live_b = compose_b(&lb, &bank, 2).unwrap();
        assert_eq!(rebuilt[0].factors.a, live_a);
        assert_eq!(rebuilt[0].factors.b, live_b);
    }

    #[test]
    fn all_zero_indices_tile_bank_row_zero() {
        let bank = init_bank::<f32>(3, 2, 15).unwrap();
        let num_sv = 2;
        let adapter = StoredAdapter {
            snapshot: AdapterSnapshot {
                bank_vectors: 3,
                subvector_len: 2,
                rank: 1,
                top_k: 1,
                index_width: 1,
                geometry: empty_geometry(),
            },
            bank: bank.values().clone(),
            manifest: vec![
                ModuleEntry {
                    layer: 0,
                    name: "q".into(),
                    side: Side::A,
                    rank: 1,
                    d_dim: 4,
                },
                ModuleEntry {
                    layer: 0,
                    name: "q".into(),
                    side: Side::B,
                    rank: 1,
                    d_dim: 4,
                },
            ],
            indices: vec![vec![0; num_sv], vec![0; num_sv]],
            weights: vec![vec![], vec![]],
        };
        let rebuilt = adapter.reconstruct().unwrap();
        let row0 = bank.row(0);
        let a = &rebuilt[0].factors.a;
        for block in 0..2 {
            assert_eq!(a[[0, block * 2]], row0[0]);
            assert_eq!(a[[0, block * 2 + 1]], row0[1]);
        }
    }

    #[test]
    fn corrupt_index_detected() {
        let mut adapter = small_adapter(2);
        adapter.indices[0][0] = 99;
        assert!(matches!(
            adapter.validate(),
            Err(Error::Parse(ParseError::CorruptIndex { .. }))
        ));
    }

    #[test]
    fn distinct_parse_errors() {
        let adapter = small_adapter(3);
        let bytes = adapter.serialize();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            StoredAdapter::deserialize(&bad_magic),
            Err(Error::Parse(ParseError::BadMagic { .. }))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 0xff;
        assert!(matches!(
            StoredAdapter::deserialize(&bad_version),
            Err(Error::Parse(ParseError::UnsupportedVersion { .. }))
        ));

        assert!(matches!(
            StoredAdapter::deserialize(&bytes[..3]),
            Err(Error::Parse(ParseError::Truncated { .. }))
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(matches!(
            StoredAdapter::deserialize(&flipped),
            Err(Error::Parse(ParseError::CrcMismatch { .. }))
        ));
    }

    #[test]
    fn oversized_bank_rejected() {
        assert!(matches!(
            index_width_for(70_000),
            Err(Error::UnsupportedBankSize(70_000))
        ));
        assert_eq!(index_width_for(256).unwrap(), 1);
        assert_eq!(index_width_for(257).unwrap(), 2);
    }
}
