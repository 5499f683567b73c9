//! Little-endian binary checkpoints of [`StudentModel`].
//!
//! Layout: magic `BLDM`, u32 version, nine u32 configuration fields
//! (vocab size, d_model, layers, heads, d_ff, max sequence length, byte
//! heads, byte vocabulary size, byte-head flag), u64 seed, u64 parameter
//! count, then the parameters as f32 in layout order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::student::{StudentConfig, StudentModel};
use crate::binio::Reader;
use crate::error::{BldError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BLDM";
pub const CHECKPOINT_VERSION: u32 = 1;

impl StudentModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::with_capacity(64 + 4 * self.num_params());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for field in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
            c.max_seq_len,
            c.n_byte_heads,
            c.byte_vocab_size,
            self.has_byte_head() as usize,
        ] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for &p in self.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint; `path` is used only for error messages.
    pub fn from_checkpoint_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { path, data, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(BldError::BadMagic {
                path: path.to_path_buf(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(BldError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut f = [0usize; 9];
        for slot in &mut f {
            *slot = r.u32()? as usize;
        }
        let config = StudentConfig {
            vocab_size: f[0],
            d_model: f[1],
            n_layers: f[2],
            n_heads: f[3],
            d_ff: f[4],
            max_seq_len: f[5],
            n_byte_heads: f[6],
            byte_vocab_size: f[7],
            seed: r.u64()?,
        };
        let has_byte_head = f[8] != 0;
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| BldError::Truncated {
            path: path.to_path_buf(),
            offset: data.len() as u64,
        })?)?;
        let params = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        StudentModel::from_parts(config, has_byte_head, params)
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| BldError::io(&tmp, e))?;
        file.write_all(&self.to_checkpoint_bytes())
            .map_err(|e| BldError::io(&tmp, e))?;
        file.sync_all().map_err(|e| BldError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| BldError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| BldError::io(path, e))?;
        Self::from_checkpoint_bytes(&data, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StudentModel {
        let mut c = StudentConfig::new(9);
        c.d_model = 4;
        c.n_heads = 1;
        c.d_ff = 8;
        c.max_seq_len = 5;
        c.n_byte_heads = 3;
        c.seed = 11;
        StudentModel::new(c).unwrap()
    }

    #[test]
    fn initial_model_round_trips_exactly() {
        let m = small();
        let back =
            StudentModel::from_checkpoint_bytes(&m.to_checkpoint_bytes(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        let det = m.detach_byte_head();
        let back = StudentModel::from_checkpoint_bytes(&det.to_checkpoint_bytes(), Path::new("m"))
            .unwrap();
        assert_eq!(back, det);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = small().to_checkpoint_bytes();
        let p = Path::new("ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            StudentModel::from_checkpoint_bytes(&bad, p),
            Err(BldError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            StudentModel::from_checkpoint_bytes(&bad, p),
            Err(BldError::UnsupportedVersion { found: 9, .. })
        ));
        assert!(matches!(
            StudentModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3], p),
            Err(BldError::Truncated { .. })
        ));
    }
}
