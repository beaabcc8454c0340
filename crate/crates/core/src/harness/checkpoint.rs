//! Single-file checkpoint container.
//!
//! Layout: magic, `u32` format version, length-prefixed JSON metadata,
//! `u32` array count, then per array a length-prefixed UTF-8 name, `u32`
//! rows, `u32` cols and little-endian values; a SHA-256 digest of all the
//! preceding bytes closes the file.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::model::Model;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"STGWCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Training RNG position, enough to reseed an identical stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal (exceeds 64 bits).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub config: TrainConfig,
    /// Epoch whose parameters are stored (1-based; 0 = untrained).
    pub epoch: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub rng: RngState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("value {v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        push_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        push_u32(&mut out, self.model.params.len())?;
        for (name, value) in self.model.params.iter() {
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, value.nrows())?;
            push_u32(&mut out, value.ncols())?;
            for &x in value.iter() {
                x.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().expect("four bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity(
                "checkpoint digest mismatch (truncated or corrupt)".into(),
            ));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len() + 4,
        };
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, requested {}",
                meta.dtype,
                T::DTYPE
            )));
        }
        let count = r.u32("array count")? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?
                .to_owned();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(T::WIDTH))
                .ok_or_else(|| Error::Integrity(format!("parameter {name}: implausible shape")))?;
            let data = r.take(n, &name)?;
            let values: Vec<T> = data.chunks_exact(T::WIDTH).map(T::read_le).collect();
            let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            named.push((name, value));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after parameter arrays".into()));
        }
        let mut model = Model::new(meta.config.model.clone(), meta.config.ablations, meta.config.seed)?;
        model.load_params(named)?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}

/// Reads just the metadata block, e.g. to pick the scalar type.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("metadata length")? as usize;
    serde_json::from_slice(r.take(len, "metadata")?).map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))
}
