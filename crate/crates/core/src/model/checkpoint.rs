//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "HSSLCKPT"
//! version      u32       1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (CheckpointMeta)
//! count        u32       number of tensor records
//! record*      name_len u32, name bytes, ndim u32, dims u64 * ndim,
//!              payload = prod(dims) elements of header.dtype, little-endian
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Model parameters are stored first under their layout names, in layout
//! order. Auxiliary tensors (optimizer moments) follow with a `aux/` prefix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Network};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"HSSLCKPT";
pub const VERSION: u32 = 1;
const AUX_PREFIX: &str = "aux/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub dtype: DType,
    pub seed: u64,
    pub epoch: usize,
    pub phase: String,
    /// Optimizer steps taken so far.
    #[serde(default)]
    pub step: u64,
    /// Free-form run information (loss log, selected task, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub state: ModelState<T>,
    pub aux: Vec<AuxTensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(state: ModelState<T>, seed: u64, epoch: usize, phase: &str) -> Self {
        Self {
            meta: CheckpointMeta {
                config: state.config.clone(),
                dtype: T::DTYPE,
                seed,
                epoch,
                phase: phase.to_string(),
                step: 0,
                extra: serde_json::Value::Null,
            },
            state,
            aux: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.config = self.state.config.clone();
        meta.dtype = T::DTYPE;
        let header = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let layout = self.state.params.layout();
        let count = layout.len() + self.aux.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (spec, values) in layout.specs().iter().zip(&self.state.params.values) {
            write_record(&mut out, &spec.name, &spec.shape, values);
        }
        for aux in &self.aux {
            write_record(&mut out, &format!("{AUX_PREFIX}{}", aux.name), &aux.shape, &aux.data);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("{}: {m}", origin.display()));
        if bytes.len() < MAGIC.len() + 12 + 32 {
            return Err(fmt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum(origin.to_path_buf()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8).ok_or_else(|| fmt("truncated"))? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fmt("truncated"))?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let hlen = r.u32().ok_or_else(|| fmt("truncated"))? as usize;
        let header = r.take(hlen).ok_or_else(|| fmt("truncated header"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(header).map_err(|e| fmt(&format!("header: {e}")))?;
        if meta.dtype != T::DTYPE {
            return Err(fmt(&format!("stored as {:?}, requested {:?}", meta.dtype, T::DTYPE)));
        }
        let net = Network::new(&meta.config)?;
        let mut params = ParamStore::<T>::zeros_like(net.layout());
        let count = r.u32().ok_or_else(|| fmt("truncated"))? as usize;
        let mut aux = Vec::new();
        let mut seen = vec![false; params.layout().len()];
        let width = T::DTYPE.size_of();
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(|| fmt("truncated record"))? as usize;
            let name = std::str::from_utf8(r.take(nlen).ok_or_else(|| fmt("truncated name"))?)
                .map_err(|_| fmt("non-utf8 tensor name"))?
                .to_string();
            let ndim = r.u32().ok_or_else(|| fmt("truncated record"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(|| fmt("truncated dims"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * width).ok_or_else(|| fmt("truncated payload"))?;
            let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
            if let Some(stripped) = name.strip_prefix(AUX_PREFIX) {
                aux.push(AuxTensor { name: stripped.to_string(), shape, data });
                continue;
            }
            let id = params
                .layout()
                .position(&name)
                .ok_or_else(|| fmt(&format!("unknown tensor {name}")))?;
            if params.spec(id).shape != shape {
                return Err(Error::Shape(format!(
                    "tensor {name}: stored {shape:?}, config implies {:?}",
                    params.spec(id).shape
                )));
            }
            params.get_mut(id).copy_from_slice(&data);
            seen[id.0] = true;
        }
        if r.pos != body.len() {
            return Err(fmt("trailing bytes"));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(fmt(&format!("missing tensor {}", params.layout().specs()[missing].name)));
        }
        let state = ModelState { config: meta.config.clone(), params };
        Ok(Self { meta, state, aux })
    }

    pub fn aux_tensor(&self, name: &str) -> Option<&AuxTensor<T>> {
        self.aux.iter().find(|a| a.name == name)
    }
}

fn write_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn save_state<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a torn checkpoint behind
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_state<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let state = ModelState::<f32>::init(&ModelConfig::micro(2, 1), 3).unwrap();
        let mut ckpt = Checkpoint::new(state, 3, 5, "pretrain");
        ckpt.aux.push(AuxTensor { name: "adam.m/x".into(), shape: vec![2], data: vec![1.5, -0.25] });
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let state = ModelState::<f32>::init(&ModelConfig::micro(2, 1), 3).unwrap();
        let mut bytes = Checkpoint::new(state, 3, 0, "pretrain").to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Path::new("x")),
            Err(Error::Checksum(_))
        ));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let state = ModelState::<f64>::init(&ModelConfig::micro(2, 1), 3).unwrap();
        let bytes = Checkpoint::new(state, 3, 0, "pretrain").to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
