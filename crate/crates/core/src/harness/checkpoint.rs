//! Little-endian binary checkpoints.
//!
//! Layout: magic `A2MC`, u32 version, u32 array count; per array a u32 name
//! length, the UTF-8 name, u32 ndim, u32 dims and row-major f64 values; then
//! a u64 digest length followed by the digest bytes.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::meta::MetaModel;
use crate::networks::{Dense, EmbeddingNet, LinearHead};

pub const MAGIC: &[u8; 4] = b"A2MC";
pub const VERSION: u32 = 1;

/// A decoded checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub arrays: Vec<(String, Tensor)>,
    pub config_digest: Vec<u8>,
}

impl Checkpoint {
    pub fn from_model(model: &MetaModel, config_digest: &[u8]) -> Self {
        let mut arrays = Vec::new();
        for (i, layer) in model.embedding.layers().iter().enumerate() {
            arrays.push((format!("embedding.{i}.weight"), layer.weight.detach()));
            arrays.push((format!("embedding.{i}.bias"), layer.bias.detach()));
        }
        arrays.push(("head.weight".into(), model.shared_head.layer.weight.detach()));
        arrays.push(("head.bias".into(), model.shared_head.layer.bias.detach()));
        Self {
            version: VERSION,
            arrays,
            config_digest: config_digest.to_vec(),
        }
    }

    fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::validation(format!("checkpoint has no array `{name}`")))
    }

    /// Rebuilds the model; the learning rate is not part of the file.
    pub fn to_model(&self, meta_lr: f64) -> Result<MetaModel> {
        let layers = self.arrays.iter().filter(|(n, _)| n.ends_with(".weight") && n.starts_with("embedding.")).count();
        let mut dense = Vec::with_capacity(layers);
        for i in 0..layers {
            dense.push(Dense::new(
                self.array(&format!("embedding.{i}.weight"))?.clone(),
                self.array(&format!("embedding.{i}.bias"))?.clone(),
            )?);
        }
        if 2 * layers + 2 != self.arrays.len() {
            return Err(Error::validation("checkpoint has unexpected arrays"));
        }
        let head = LinearHead::new(self.array("head.weight")?.clone(), self.array("head.bias")?.clone())?;
        MetaModel::new(EmbeddingNet::from_layers(dense)?, head, meta_lr)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config_digest.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:02x?}, expected `A2MC`"),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail_at(at, format!("unsupported version {version}")));
        }
        let count = r.u32("array count")?;
        let mut arrays = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "array name")?)
                .map_err(|_| r.fail_at(at, format!("array {i} name is not UTF-8")))?
                .to_string();
            let at = r.pos;
            let ndim = r.u32("ndim")? as usize;
            if ndim == 0 {
                return Err(r.fail_at(at, format!("array `{name}` has no dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim.min(8));
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let at = r.pos;
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return Err(r.fail_at(at, format!("array `{name}` has a zero dimension")));
                }
                numel = numel
                    .checked_mul(d)
                    .filter(|n| n.saturating_mul(8) <= bytes.len())
                    .ok_or_else(|| r.fail_at(at, format!("array `{name}` is larger than the file")))?;
                dims.push(d);
            }
            let raw = r.take(numel * 8, "array values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Tensor::from_vec(&dims, values)?));
        }
        let at = r.pos;
        let dlen = r.u64("digest length")?;
        let dlen = usize::try_from(dlen)
            .ok()
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| r.fail_at(at, format!("digest length {dlen} exceeds the file")))?;
        let digest = r.take(dlen, "digest")?.to_vec();
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            arrays,
            config_digest: digest,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, at: usize, msg: String) -> Error {
        Error::Format { offset: at as u64, msg }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail_at(self.pos, format!("truncated file while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Writes the model's checkpoint to `path` (via a temporary file and rename).
pub fn save_checkpoint(model: &MetaModel, config_digest: &[u8], path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::from_model(model, config_digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, ck.encode()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
