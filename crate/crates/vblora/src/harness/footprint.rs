//! Selection-footprint instrumentation.
//!
//! The footprint records, per training step, which bank rows each sub-vector
//! selected, as a monotone cumulative bitset (bit `sv * h + index`). Binary
//! layout (.vbfp, little-endian):
//!
//! ```text
//! magic "VBFP" | version u16
//! num_subvectors u32 | bank_vectors u32 | record_count u32 | words_per_page u32
//! per record: step u32 | new_selections u32 | words_per_page x u64 (cumulative page)
//! latest block: per sub-vector: count u16 | count x u32 (current selection)
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, ParseError, Result};

const MAGIC: [u8; 4] = *b"VBFP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintRecord {
    pub step: u32,
    pub new_selections: u32,
    /// Cumulative selection mask snapshot, packed 64 bits per word.
    pub cumulative: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintLog {
    pub num_subvectors: usize,
    pub bank_vectors: usize,
    pub records: Vec<FootprintRecord>,
    /// Most recent selection per sub-vector.
    pub latest: Vec<Vec<u32>>,
    mask: Vec<u64>,
}

/// Per-bank-row counts of sub-vectors selecting it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    pub counts: Vec<usize>,
}

impl UsageHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn spread(&self) -> (usize, usize) {
        let min = self.counts.iter().copied().min().unwrap_or(0);
        let max = self.counts.iter().copied().max().unwrap_or(0);
        (min, max)
    }
}

/// Histogram of the given per-sub-vector selections.
pub fn usage_histogram_from(selections: &[Vec<u32>], bank_vectors: usize) -> UsageHistogram {
    let mut counts = vec![0usize; bank_vectors];
    for sel in selections {
        for &idx in sel {
            counts[idx as usize] += 1;
        }
    }
    UsageHistogram { counts }
}

impl FootprintLog {
    pub fn new(num_subvectors: usize, bank_vectors: usize) -> Self {
        let words = (num_subvectors * bank_vectors).div_ceil(64);
        Self {
            num_subvectors,
            bank_vectors,
            records: Vec::new(),
            latest: vec![Vec::new(); num_subvectors],
            mask: vec![0u64; words],
        }
    }

    /// Records one step's selections; returns how many (sub-vector, index)
    /// pairs were seen for the first time.
    pub fn record(&mut self, step: usize, selections: &[Vec<u32>]) -> usize {
        assert_eq!(selections.len(), self.num_subvectors);
        let mut new = 0usize;
        for (sv, sel) in selections.iter().enumerate() {
            for &idx in sel {
                let bit = sv * self.bank_vectors + idx as usize;
                let word = bit / 64;
                let mask = 1u64 << (bit % 64);
                if self.mask[word] & mask == 0 {
                    self.mask[word] |= mask;
                    new += 1;
                }
            }
        }
        self.records.push(FootprintRecord {
            step: step as u32,
            new_selections: new as u32,
            cumulative: self.mask.clone(),
        });
        self.latest = selections.to_vec();
        new
    }

    /// Total first-time selections so far (popcount of the cumulative mask).
    pub fn total_selected(&self) -> usize {
        self.mask.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn subvector_popcount(&self, page: &[u64], sv: usize) -> usize {
        let mut n = 0;
        for idx in 0..self.bank_vectors {
            let bit = sv * self.bank_vectors + idx;
            if page[bit / 64] & (1u64 << (bit % 64)) != 0 {
                n += 1;
            }
        }
        n
    }

    /// Number of sub-vectors whose selection set ever changed after the
    /// first record.
    pub fn changed_subvectors(&self) -> usize {
        let (Some(first), Some(last)) = (self.records.first(), self.records.last()) else {
            return 0;
        };
        (0..self.num_subvectors)
            .filter(|&sv| {
                self.subvector_popcount(&last.cumulative, sv)
                    > self.subvector_popcount(&first.cumulative, sv)
            })
            .count()
    }

    /// First-time selection counts per step window of the given width.
    pub fn density(&self, window: usize) -> Vec<usize> {
        assert!(window > 0);
        let max_step = self.records.last().map(|r| r.step as usize).unwrap_or(0);
        let mut out = vec![0usize; max_step / window + 1];
        for rec in &self.records {
            out[rec.step as usize / window] += rec.new_selections as usize;
        }
        out
    }

    /// Are the cumulative snapshots monotone (no bit ever cleared)?
    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| {
            w[0].cumulative
                .iter()
                .zip(&w[1].cumulative)
                .all(|(a, b)| a & !b == 0)
        })
    }

    /// Usage histogram of the latest recorded selections.
    pub fn usage_histogram(&self) -> UsageHistogram {
        usage_histogram_from(&self.latest, self.bank_vectors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let words = self.mask.len();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_subvectors as u32).to_le_bytes());
        out.extend_from_slice(&(self.bank_vectors as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(words as u32).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&rec.step.to_le_bytes());
            out.extend_from_slice(&rec.new_selections.to_le_bytes());
            for w in &rec.cumulative {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        for sel in &self.latest {
            out.extend_from_slice(&(sel.len() as u16).to_le_bytes());
            for &idx in sel {
                out.extend_from_slice(&idx.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize, pos: usize, what: &'static str| -> Result<()> {
            if bytes.len() < pos + n {
                return Err(ParseError::Truncated {
                    what,
                    needed: n,
                    remaining: bytes.len().saturating_sub(pos),
                }
                .into());
            }
            Ok(())
        };
        need(4, 0, "magic")?;
        if bytes[0..4] != MAGIC {
            return Err(ParseError::BadMagic {
                found: bytes[0..4].try_into().unwrap(),
            }
            .into());
        }
        need(2, 4, "version")?;
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(ParseError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            }
            .into());
        }
        let mut pos = 6;
        let take_u32 = |pos: &mut usize, what: &'static str| -> Result<u32> {
            need(4, *pos, what)?;
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            Ok(v)
        };
        let num_subvectors = take_u32(&mut pos, "sub-vector count")? as usize;
        let bank_vectors = take_u32(&mut pos, "bank size")? as usize;
        let record_count = take_u32(&mut pos, "record count")? as usize;
        let words = take_u32(&mut pos, "page width")? as usize;
        if words != (num_subvectors * bank_vectors).div_ceil(64) {
            return Err(ParseError::InvalidAdapter(format!(
                "page width {words} does not match {num_subvectors} x {bank_vectors} mask"
            ))
            .into());
        }
        let mut records = Vec::with_capacity(record_count);
        for _ in 0..record_count {
            let step = take_u32(&mut pos, "record step")?;
            let new_selections = take_u32(&mut pos, "record new-selection count")?;
            need(8 * words, pos, "bitset page")?;
            let mut page = Vec::with_capacity(words);
            for w in 0..words {
                page.push(u64::from_le_bytes(
                    bytes[pos + 8 * w..pos + 8 * w + 8].try_into().unwrap(),
                ));
            }
            pos += 8 * words;
            records.push(FootprintRecord {
                step,
                new_selections,
                cumulative: page,
            });
        }
        let mut latest = Vec::with_capacity(num_subvectors);
        for _ in 0..num_subvectors {
            need(2, pos, "latest selection count")?;
            let n = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            need(4 * n, pos, "latest selection indices")?;
            let mut sel = Vec::with_capacity(n);
            for i in 0..n {
                sel.push(u32::from_le_bytes(
                    bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap(),
                ));
            }
            pos += 4 * n;
            latest.push(sel);
        }
        if pos != bytes.len() {
            return Err(ParseError::InvalidAdapter(format!(
                "{} trailing bytes after footprint log",
                bytes.len() - pos
            ))
            .into());
        }
        let mask = records
            .last()
            .map(|r| r.cumulative.clone())
            .unwrap_or_else(|| vec![0u64; words]);
        Ok(Self {
            num_subvectors,
            bank_vectors,
            records,
            latest,
            mask,
        })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// CSV of first-time selections: `step,subvector,bank_index`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,subvector,bank_index\n");
        let words = self.mask.len();
        let mut prev = vec![0u64; words];
        for rec in &self.records {
            for sv in 0..self.num_subvectors {
                for idx in 0..self.bank_vectors {
                    let bit = sv * self.bank_vectors + idx;
                    let word = bit / 64;
                    let m = 1u64 << (bit % 64);
                    if rec.cumulative[word] & m != 0 && prev[word] & m == 0 {
                        out.push_str(&format!("{},{sv},{idx}\n", rec.step));
                    }
                }
            }
            prev.copy_from_slice(&rec.cumulative);
        }
        std::fs::write(path, out).map_err(Error::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_and_counts_new_selections() {
        let mut log = FootprintLog::new(2, 4);
        let n0 = log.record(0, &[vec![0, 1], vec![2, 3]]);
        assert_eq!(n0, 4);
        let n1 = log.record(1, &[vec![0, 1], vec![2, 3]]);
        assert_eq!(n1, 0);
        let n2 = log.record(2, &[vec![0, 2], vec![2, 3]]);
        assert_eq!(n2, 1);
        assert_eq!(log.total_selected(), 5);
        assert!(log.is_monotone());
        assert_eq!(log.changed_subvectors(), 1);
    }

    #[test]
    fn density_sums_to_popcount() {
        let mut log = FootprintLog::new(1, 8);
        log.record(0, &[vec![0]]);
        log.record(1, &[vec![1]]);
        log.record(2, &[vec![1]]);
        log.record(3, &[vec![7]]);
        let total: usize = log.density(100).iter().sum();
        assert_eq!(total, log.total_selected());
        let per_step = log.density(1);
        assert_eq!(per_step, vec![1, 1, 0, 1]);
    }

    #[test]
    fn usage_histogram_counts_latest() {
        let mut log = FootprintLog::new(3, 4);
        log.record(0, &[vec![0, 1], vec![1, 2], vec![1, 3]]);
        let hist = log.usage_histogram();
        assert_eq!(hist.counts, vec![1, 3, 1, 1]);
        assert_eq!(hist.total(), 6);
    }

    #[test]
    fn binary_round_trip() {
        let mut log = FootprintLog::new(3, 10);
        log.record(0, &[vec![0, 5], vec![9, 1], vec![3, 4]]);
        log.record(7, &[vec![0, 5], vec![9, 2], vec![3, 4]]);
        let bytes = log.to_bytes();
        let back = FootprintLog::from_bytes(&bytes).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn truncation_detected() {
        let mut log = FootprintLog::new(1, 4);
        log.record(0, &[vec![0]]);
        let bytes = log.to_bytes();
        assert!(FootprintLog::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(FootprintLog::from_bytes(&bytes[..3]).is_err());
    }
}
