//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "PSEGCKPT"
//! version   u32       1
//! meta_len  u64
//! meta      meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count     u64
//! count x entry:
//!   name_len u32, name (UTF-8)
//!   role     u8   0 = weight, 1 = buffer, 2 = optimizer state
//!   dtype    u8   0 = f32, 1 = f64
//!   ndim     u8,  dims ndim x u64
//!   values   prod(dims) x dtype, little-endian
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so an
//! interrupted write never replaces a good checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::EntryKind;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Buffer,
    OptimizerState,
}

impl TensorRole {
    fn code(self) -> u8 {
        match self {
            TensorRole::Weight => 0,
            TensorRole::Buffer => 1,
            TensorRole::OptimizerState => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TensorRole::Weight),
            1 => Some(TensorRole::Buffer),
            2 => Some(TensorRole::OptimizerState),
            _ => None,
        }
    }
}

impl From<EntryKind> for TensorRole {
    fn from(k: EntryKind) -> Self {
        match k {
            EntryKind::Weight => TensorRole::Weight,
            EntryKind::Buffer => TensorRole::Buffer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub step: u64,
    /// Adam step counter.
    pub optimizer_t: u64,
    pub config_hash: String,
    /// Full configuration text the run was started with.
    #[serde(default)]
    pub config: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, (TensorRole, Tensor<T>)>,
}

impl<T: Element> Checkpoint<T> {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: TensorRole, t: Tensor<T>) {
        self.tensors.insert(name.into(), (role, t));
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, (role, t)) in &self.tensors {
            if t.shape().len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("{name}: too many dimensions")));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(role.code());
            out.push(T::DTYPE.code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Decodes a container, converting stored values to `T` if needed.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?
                .to_string();
            let role = TensorRole::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: bad role")))?;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: bad dtype")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size())?;
            let t = match dtype {
                DType::F32 => decode_values::<f32>(&shape, raw).cast::<T>(),
                DType::F64 => decode_values::<f64>(&shape, raw).cast::<T>(),
            };
            tensors.insert(name, (role, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn decode_values<U: Element>(shape: &[usize], raw: &[u8]) -> Tensor<U> {
    let size = std::mem::size_of::<U>();
    let data = raw.chunks_exact(size).map(U::read_le).collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
