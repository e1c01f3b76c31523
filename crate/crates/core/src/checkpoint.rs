//! `EDMC` checkpoints: a config snapshot, the training step and a table of
//! named little-endian arrays.
//!
//! Layout: `b"EDMC"`, version `u32`, config length `u64` + UTF-8 TOML, step
//! `u64`, array count `u32`, then per array: name length `u32` + UTF-8 name,
//! dtype code `u8`, rank `u8`, `rank × u64` dims, payload. Integers are
//! little-endian.

use std::path::Path;

use crate::config::Config;
use crate::error::{EdmError, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"EDMC";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl StoredArray {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        StoredArray {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload: T::to_le_bytes_vec(t.data()),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(EdmError::Checkpoint(format!(
                "array {} has dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.payload.chunks_exact(self.dtype.size()).map(T::from_le_chunk).collect();
        Tensor::new(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub arrays: Vec<StoredArray>,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer in `store`.
    pub fn capture<T: Element>(store: &ParamStore<T>, config: &Config, step: u64) -> Self {
        Checkpoint {
            config: config.clone(),
            step,
            arrays: store.named_tensors().map(|(n, t)| StoredArray::from_tensor(n, t)).collect(),
        }
    }

    /// Writes every stored array into `store`; names and shapes must agree
    /// exactly.
    pub fn restore<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected = store.named_tensors().count();
        if expected != self.arrays.len() {
            return Err(EdmError::Checkpoint(format!(
                "checkpoint holds {} arrays, model expects {expected}",
                self.arrays.len()
            )));
        }
        for a in &self.arrays {
            store
                .assign(&a.name, a.to_tensor()?)
                .map_err(|e| EdmError::Checkpoint(format!("{}: {e}", a.name)))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml_string();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.dtype.code());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&a.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(EdmError::Checkpoint("magic mismatch: not an EDMC file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(EdmError::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.len_u64("config length")?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
            .map_err(|_| EdmError::Checkpoint("config is not UTF-8".into()))?;
        let config = Config::from_toml_str(cfg_text)?;
        let step = r.u64("step")?;
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| EdmError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| EdmError::Checkpoint(format!("unknown dtype code {code} for {name}")))?;
            let rank = r.take(1, "rank")?[0] as usize;
            if rank > MAX_RANK {
                return Err(EdmError::Checkpoint(format!("rank {rank} of {name} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.len_u64("dim")?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| EdmError::Checkpoint(format!("dimensions of {name} overflow")))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| EdmError::Checkpoint(format!("byte count of {name} overflows")))?;
            let payload = r.take(nbytes, &name)?.to_vec();
            arrays.push(StoredArray { name, dtype, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(EdmError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| EdmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| EdmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the remaining length before handing out a slice.
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(EdmError::Checkpoint(format!("truncated while reading {what}: need {n} bytes, {left} left")));
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

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| EdmError::Checkpoint(format!("{what} {v} does not fit in memory")))
    }
}
