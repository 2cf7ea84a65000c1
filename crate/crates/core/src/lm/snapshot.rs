//! Binary model snapshots.
//!
//! ```text
//! offset  size  field (little-endian)
//!  0       8    magic "DKDSNAP\0"
//!  8       4    format version u32 = 1
//! 12       1    model kind u8        0 bigram | 1 transformer
//! 13       1    stage u8             0 raw | 1 ft | 2 distilled
//! 14       2    reserved, zero
//! 16      24    vocab_size, embed_dim, num_layers, num_heads,
//!               context_limit, ff_dim: u32 each (zero for bigram)
//! 40       8    init seed u64
//! 48       8    vocab fingerprint u64
//! 56       8    parameter count u64
//! 64     4·n    parameters, f32
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::bigram::BigramModel;
use super::model::{LanguageModel, ModelKind};
use super::transformer::{Transformer, TransformerConfig};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: [u8; 8] = *b"DKDSNAP\0";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Raw,
    Ft,
    Distilled,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Raw => 0,
            Stage::Ft => 1,
            Stage::Distilled => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stage::Raw),
            1 => Ok(Stage::Ft),
            2 => Ok(Stage::Distilled),
            other => Err(Error::Snapshot(format!("unknown stage tag {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Raw => "raw",
            Stage::Ft => "ft",
            Stage::Distilled => "distilled",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Stage::Raw),
            "ft" => Ok(Stage::Ft),
            "distilled" => Ok(Stage::Distilled),
            other => Err(Error::input(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub model: LanguageModel,
    pub stage: Stage,
    pub vocab_fingerprint: u64,
}

impl ModelSnapshot {
    /// Wraps a model, rounding its parameters to the stored precision so
    /// that the in-memory model and a reloaded one agree bit for bit.
    pub fn new(mut model: LanguageModel, stage: Stage, vocab_fingerprint: u64) -> Self {
        model.quantize();
        Self { model, stage, vocab_fingerprint }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * params.len());
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        let (kind, dims, seed) = match &self.model {
            LanguageModel::Bigram(m) => (0u8, [m.vocab_size(), 0, 0, 0, 0, 0], 0),
            LanguageModel::Transformer(m) => {
                let c = m.config();
                (
                    1u8,
                    [c.vocab_size, c.embed_dim, c.num_layers, c.num_heads, c.context_limit, c.ff_dim],
                    c.seed,
                )
            }
        };
        out.push(kind);
        out.push(self.stage.code());
        out.extend_from_slice(&[0, 0]);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&self.vocab_fingerprint.to_le_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for &p in params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Snapshot(format!("file too short ({} bytes)", bytes.len())));
        }
        if bytes[..8] != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported format version {version}")));
        }
        let kind = bytes[12];
        let stage = Stage::from_code(bytes[13])?;
        let dims: Vec<usize> = (0..6).map(|i| u32_at(16 + 4 * i) as usize).collect();
        let seed = u64_at(40);
        let vocab_fingerprint = u64_at(48);
        let count = u64_at(56) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count.saturating_mul(4) {
            return Err(Error::Snapshot(format!(
                "parameter block has {} bytes, header declares {count} parameters",
                body.len()
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let model = match kind {
            0 => LanguageModel::Bigram(BigramModel::from_params(dims[0], params)?),
            1 => {
                let cfg = TransformerConfig {
                    vocab_size: dims[0],
                    embed_dim: dims[1],
                    num_layers: dims[2],
                    num_heads: dims[3],
                    context_limit: dims[4],
                    ff_dim: dims[5],
                    seed,
                };
                LanguageModel::Transformer(Transformer::from_params(cfg, params)?)
            }
            other => return Err(Error::Snapshot(format!("unknown model kind {other}"))),
        };
        Ok(Self { model, stage, vocab_fingerprint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format_args!("writing snapshot {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format_args!("reading snapshot {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Snapshot(m) => Error::Snapshot(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks the vocabulary fingerprint.
    pub fn load_for_vocab(path: &Path, fingerprint: u64) -> Result<Self> {
        let snap = Self::load(path)?;
        if snap.vocab_fingerprint != fingerprint {
            return Err(Error::Snapshot(format!(
                "{}: vocabulary fingerprint {:016x} does not match the run's {:016x}",
                path.display(),
                snap.vocab_fingerprint,
                fingerprint
            )));
        }
        Ok(snap)
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }
}

/// Hex SHA-256 of a file, used to prove frozen models were not modified.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format_args!("reading {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::bigram::fit_tabular;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 10,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            context_limit: 6,
            ff_dim: 12,
            seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = LanguageModel::Transformer(Transformer::new(cfg()).unwrap());
        let snap = ModelSnapshot::new(m, Stage::Ft, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        snap.save(&path).unwrap();
        let back = ModelSnapshot::load_for_vocab(&path, 42).unwrap();
        assert_eq!(back.stage, Stage::Ft);
        assert_eq!(back.model.params(), snap.model.params());
        let toks = [1, 5, 3, 9];
        assert_eq!(back.model.forward(&toks).unwrap(), snap.model.forward(&toks).unwrap());
        assert_eq!(back.to_bytes(), snap.to_bytes());
        assert_eq!(file_sha256(&path).unwrap().len(), 64);
        assert!(ModelSnapshot::load_for_vocab(&path, 43).is_err());
    }

    #[test]
    fn bigram_round_trip_and_corruption() {
        let m = LanguageModel::Bigram(fit_tabular(5, &[vec![1, 2, 3]]).unwrap());
        let snap = ModelSnapshot::new(m, Stage::Raw, 1);
        let bytes = snap.to_bytes();
        assert_eq!(bytes.len(), 64 + 4 * 25);
        let back = ModelSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params(), snap.model.params());
        assert!(ModelSnapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelSnapshot::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[13] = 9;
        assert!(ModelSnapshot::from_bytes(&bad).is_err());
    }
}
