//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MCSECKPT"
//! version      u32
//! config_hash  32 bytes (SHA-256 of the canonical training config)
//! step         u64
//! dev_metric   f64
//! dims         4 × u64  (d, d_s, d_v, vocab)
//! per group    u64 length, then that many f64 values
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Dims, ModelParams, ParamGroup, Tensors};

pub const MAGIC: &[u8; 8] = b"MCSECKPT";
pub const FORMAT_VERSION: u32 = 1;

pub type ConfigHash = [u8; 32];

pub fn hash_bytes(bytes: &[u8]) -> ConfigHash {
    Sha256::digest(bytes).into()
}

pub fn hash_hex(hash: &ConfigHash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: usize,
    /// Dev-set Spearman ×100 at `step`.
    pub dev_metric: f64,
    pub config_hash: ConfigHash,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let mut out = Vec::with_capacity(96 + 8 * self.params.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&self.dev_metric.to_le_bytes());
        for x in [dims.d, dims.d_s, dims.d_v, dims.vocab] {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
        for g in ParamGroup::ALL {
            let values = self.params.values.group(g);
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let config_hash: ConfigHash = r.array()?;
        let step = r.u64()? as usize;
        let dev_metric = f64::from_le_bytes(r.array()?);
        let dims = Dims {
            d: r.u64()? as usize,
            d_s: r.u64()? as usize,
            d_v: r.u64()? as usize,
            vocab: r.u64()? as usize,
        };
        dims.validate()
            .map_err(|e| Error::Checkpoint(format!("bad dims: {e}")))?;
        let mut values = Tensors::zeros(&dims);
        for g in ParamGroup::ALL {
            let len = r.u64()? as usize;
            let dst = values.group_mut(g);
            if len != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "{} has {len} values, dims imply {}",
                    g.name(),
                    dst.len()
                )));
            }
            for x in dst.iter_mut() {
                *x = f64::from_le_bytes(r.array()?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let params =
            ModelParams::from_values(dims, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            params,
            step,
            dev_metric,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
