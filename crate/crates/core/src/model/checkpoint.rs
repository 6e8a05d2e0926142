//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "ATFUSE1"
//! config_len, config text (`model.key = value` lines)
//! blob_count
//! per blob: name_len, name, ndim, dims..., f32 data
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{AtfuseModel, ModelConfig, ModelError};

pub const MAGIC: &[u8; 7] = b"ATFUSE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("shape inconsistency for `{name}`: config implies {expected:?}, blob has {found:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing blob `{0}`")]
    MissingBlob(String),
    #[error("checkpoint has unexpected blob `{0}`")]
    UnexpectedBlob(String),
    #[error("blob `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("{0} trailing bytes after the last blob")]
    Trailing(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(model: &AtfuseModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = model.config().to_text();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.store().len());
    for (_, p) in model.store().iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            put_u32(&mut out, d);
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Config(e.to_string()))
    }
}

/// Rebuilds a model from its config and overwrites every tensor with the
/// stored blobs, which must match the config's layout exactly.
pub fn read_checkpoint(bytes: &[u8]) -> Result<AtfuseModel> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.pos = MAGIC.len();
    let cfg_text = r.string()?;
    let config = ModelConfig::from_text(&cfg_text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = AtfuseModel::new(config)?;
    let count = r.u32()?;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let id = model.store().id(&name).ok_or_else(|| CheckpointError::UnexpectedBlob(name.clone()))?;
        let expected = model.store().get(id).shape.clone();
        if expected != shape {
            return Err(CheckpointError::Shape { name, expected, found: shape });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        model.store_mut().get_mut(id).data = data;
        seen.insert(name);
    }
    if let Some((_, missing)) = model.store().iter().find(|(_, p)| !seen.contains(&p.name)) {
        return Err(CheckpointError::MissingBlob(missing.name.clone()));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok(model)
}

/// Path of the standalone config written next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

/// Writes the checkpoint and a `.cfg` sidecar holding the model config.
pub fn save_checkpoint(model: &AtfuseModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    fs::write(path, write_checkpoint(model)).map_err(io(path))?;
    let side = sidecar_path(path);
    fs::write(&side, model.config().to_text()).map_err(io(&side))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AtfuseModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(&bytes)
}
