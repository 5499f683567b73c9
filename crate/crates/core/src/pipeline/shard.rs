//! Persisted teacher byte log-probabilities.
//!
//! Layout, all little-endian: magic `BLDP`, u32 version, 32-byte vocabulary
//! fingerprint, u64 beam width (`u64::MAX` for unbounded), f64 pruning
//! threshold, u64 record count; then per record a u64 sample id, a u64 byte
//! length `n` and `n * 257` f32 log-probabilities, one 257-way vector per
//! byte position (bytes 0..=255, then end of sequence).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::beam::{BeamParams, DEFAULT_QUERY_BATCH};
use crate::binio::Reader;
use crate::error::{BldError, Result};
use crate::prob::{ByteDistribution, BYTE_OUTCOMES};
use crate::tokenizer::Vocabulary;

pub const SHARD_MAGIC: [u8; 4] = *b"BLDP";
pub const SHARD_VERSION: u32 = 1;

/// Stored vectors must exponentiate to within this of one.
pub const STORED_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardHeader {
    pub fingerprint: [u8; 32],
    pub k: u64,
    pub epsilon: f64,
}

impl ShardHeader {
    pub fn new(vocab: &Vocabulary, params: BeamParams) -> Self {
        Self {
            fingerprint: vocab.fingerprint(),
            k: params.k as u64,
            epsilon: params.epsilon,
        }
    }

    pub fn params(&self) -> BeamParams {
        BeamParams {
            k: usize::try_from(self.k).unwrap_or(usize::MAX),
            epsilon: self.epsilon,
            batch_size: DEFAULT_QUERY_BATCH,
        }
    }
}

/// One sample's conditionals as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardRecord {
    pub id: u64,
    logp: Vec<f32>,
}

impl ShardRecord {
    pub fn from_dists(id: u64, dists: &[ByteDistribution]) -> Self {
        let logp = dists
            .iter()
            .flat_map(|d| d.probs().iter().map(|p| p.ln() as f32))
            .collect();
        Self { id, logp }
    }

    pub fn byte_len(&self) -> usize {
        self.logp.len() / BYTE_OUTCOMES
    }

    pub fn position(&self, i: usize) -> &[f32] {
        &self.logp[i * BYTE_OUTCOMES..(i + 1) * BYTE_OUTCOMES]
    }

    /// Exponentiated and renormalized in f64, so every returned
    /// distribution sums to one up to rounding. Fails when a stored vector
    /// is off by more than [`STORED_TOLERANCE`].
    pub fn distributions(&self) -> Result<Vec<ByteDistribution>> {
        (0..self.byte_len())
            .map(|i| {
                let probs: Vec<f64> = self.position(i).iter().map(|&l| (l as f64).exp()).collect();
                let sum: f64 = probs.iter().sum();
                if !((sum - 1.0).abs() <= STORED_TOLERANCE) {
                    return Err(BldError::NotNormalized { sum });
                }
                ByteDistribution::from_masses(probs)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbShard {
    pub header: ShardHeader,
    pub records: Vec<ShardRecord>,
}

impl ProbShard {
    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self.records.iter().map(|r| 16 + 4 * r.logp.len()).sum();
        let mut out = Vec::with_capacity(64 + body);
        out.extend_from_slice(&SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.header.fingerprint);
        out.extend_from_slice(&self.header.k.to_le_bytes());
        out.extend_from_slice(&self.header.epsilon.to_bits().to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.extend_from_slice(&(r.byte_len() as u64).to_le_bytes());
            for l in &r.logp {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    /// Parses a shard, checking its fingerprint against `vocab` when given.
    /// `path` is used only for error messages.
    pub fn from_bytes(data: &[u8], path: &Path, vocab: Option<&Vocabulary>) -> Result<Self> {
        let mut r = Reader::new(path, data);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != SHARD_MAGIC {
            return Err(BldError::BadMagic {
                path: path.to_path_buf(),
                expected: SHARD_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != SHARD_VERSION {
            return Err(BldError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: SHARD_VERSION,
            });
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if vocab.is_some_and(|v| v.fingerprint() != fingerprint) {
            return Err(BldError::FingerprintMismatch {
                path: path.to_path_buf(),
            });
        }
        let header = ShardHeader {
            fingerprint,
            k: r.u64()?,
            epsilon: r.f64()?,
        };
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let id = r.u64()?;
            let len = r.u64()? as usize;
            let n = len.saturating_mul(BYTE_OUTCOMES).saturating_mul(4);
            let raw = r.take(n)?;
            let logp = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            records.push(ShardRecord { id, logp });
        }
        if !r.is_empty() {
            return Err(BldError::Parse {
                what: "probability shard",
                line: 0,
                reason: format!("{} trailing bytes", data.len() - r.pos),
            });
        }
        Ok(Self { header, records })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let data = fs::read(path).map_err(|e| BldError::io(path, e))?;
        Self::from_bytes(&data, path, Some(vocab))
    }
}

pub(crate) fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut file = fs::File::create(&tmp).map_err(|e| BldError::io(&tmp, e))?;
    file.write_all(data).map_err(|e| BldError::io(&tmp, e))?;
    file.sync_all().map_err(|e| BldError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BldError::io(path, e))
}
