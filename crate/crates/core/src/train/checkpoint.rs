//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `"OCTC"`, `u32` version, `u32` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, a `u32` rank, one `u64` per dimension and the
//! `f32` payload; the remainder of the file is a UTF-8 JSON metadata block.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OCTC";
pub const VERSION: u32 = 1;
/// Magic, version and tensor count.
pub const HEADER_BYTES: usize = 12;

/// Everything recorded alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub config_digest: String,
    /// Initialization seed of the parameter store.
    pub seed: u64,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Which tensors are running statistics rather than parameters.
    pub buffers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: String,
}

impl Checkpoint {
    /// Parameters then buffers of `model`, each in name order.
    pub fn from_model(model: &Model, step: usize, metrics: BTreeMap<String, f64>) -> Result<Self> {
        let p = &model.params;
        let meta = CheckpointMeta {
            model: model.cfg.clone(),
            config_digest: model.cfg.digest(),
            seed: p.seed(),
            step,
            metrics,
            buffers: p.buffers().map(|(n, _)| n.to_string()).collect(),
        };
        Ok(Checkpoint {
            tensors: p
                .params()
                .chain(p.buffers())
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            metadata: serde_json::to_string(&meta)?,
        })
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        serde_json::from_str(&self.metadata).map_err(|e| Error::Format(format!("metadata: {e}")))
    }

    /// Rebuild the model described by the metadata.
    pub fn to_model(&self) -> Result<Model> {
        let meta = self.meta()?;
        if meta.config_digest != meta.model.digest() {
            return Err(Error::Format("config digest does not match the stored config".into()));
        }
        meta.model.validate()?;
        let buffers: HashSet<&str> = meta.buffers.iter().map(String::as_str).collect();
        let mut params = ParamStore::new(meta.seed);
        for (name, t) in &self.tensors {
            if buffers.contains(name.as_str()) {
                params.insert_buffer(name.clone(), t.clone());
            } else {
                params.insert_param(name.clone(), t.clone());
            }
        }
        let model = Model {
            cfg: meta.model,
            params,
        };
        // a forward pass would create anything missing; refuse instead
        let fresh = Model::new(model.cfg.clone(), meta.seed)?;
        for (name, t) in fresh.params.params() {
            match model.params.param(name) {
                Some(have) if have.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "checkpoint lacks parameter `{name}` of shape {:?}",
                        t.shape()
                    )))
                }
            }
        }
        if model.params.params().count() != fresh.params.params().count() {
            return Err(Error::Format(
                "checkpoint has parameters the config does not use".into(),
            ));
        }
        Ok(model)
    }

    /// Exact encoded size.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .tensors
                .iter()
                .map(|(n, t)| 4 + n.len() + 4 + 8 * t.ndim() + 4 * t.numel())
                .sum::<usize>()
            + self.metadata.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.tensors.len())
                .map_err(|_| Error::Format("too many tensors".into()))?
                .to_le_bytes(),
        );
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.metadata.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "version {version} is not supported (expected {VERSION})"
            )));
        }
        let count = r.u32("tensor count")? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            let ndim = r.u32("rank")? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("truncated payload for `{name}`")))?;
            let data = r
                .take(4 * numel, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let metadata = std::str::from_utf8(&bytes[r.pos..])
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?
            .to_string();
        Ok(Checkpoint { tensors, metadata })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path, step: usize, metrics: BTreeMap<String, f64>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_model(model, step, metrics)?;
    write_checkpoint(&ckpt, path)?;
    Ok(ckpt)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                (
                    "a".into(),
                    Tensor::from_f64([2, 3], &[1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap(),
                ),
                ("scalar".into(), Tensor::scalar(0.1f32)),
            ],
            metadata: "{\"k\":1}".into(),
        }
    }

    #[test]
    fn bytes_round_trip_and_size() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        assert_eq!(b.len(), c.encoded_len());
        assert_eq!(b.len(), 12 + (4 + 1 + 4 + 16 + 24) + (4 + 6 + 4 + 0 + 4) + 7);
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        for ((_, x), (_, y)) in back.tensors.iter().zip(&c.tensors) {
            let bx: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let b = sample().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(Checkpoint::from_bytes(&b[..30]), Err(Error::Format(m)) if m.contains("truncated")));
        let mut dup = sample();
        dup.tensors.push(("a".into(), Tensor::scalar(1.0)));
        assert!(dup.to_bytes().is_err());
    }
}
