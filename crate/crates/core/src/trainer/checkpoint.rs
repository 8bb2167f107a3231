//! "FXCK" checkpoint container.
//!
//! ```text
//! magic "FXCK" | u32 version | u64 step | 32-byte config hash | u32 count
//! count × ( u32 name_len | name | u32 rank | rank × u64 dim | f64 data... )
//! ```
//! Everything little-endian. Optimizer moments are stored as tensors named
//! `adam.m.<param>` / `adam.v.<param>`.

use std::path::Path;

use crate::error::{FuseError, Result};
use crate::numcore::{ParamSet, ParamTensor};

pub const MAGIC: &[u8; 4] = b"FXCK";
pub const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    pub params: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
}

fn rename(set: &ParamSet, prefix: &str) -> Result<Vec<ParamTensor>> {
    set.iter()
        .map(|t| ParamTensor::from_vec(format!("{prefix}{}", t.name()), t.shape(), t.data().to_vec()))
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FuseError::format(self.path, "truncated checkpoint"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<ParamTensor> = self.params.iter().cloned().collect();
        tensors.extend(rename(&self.adam_m, M_PREFIX)?);
        tensors.extend(rename(&self.adam_v, V_PREFIX)?);

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            let name = t.name().as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(FuseError::format(path, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FuseError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let (mut params, mut adam_m, mut adam_v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FuseError::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 2 {
                return Err(FuseError::format(path, format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| FuseError::format(path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let (set, name) = if let Some(rest) = name.strip_prefix(M_PREFIX) {
                (&mut adam_m, rest.to_string())
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                (&mut adam_v, rest.to_string())
            } else {
                (&mut params, name)
            };
            let t = ParamTensor::from_vec(name, &shape, data)
                .map_err(|e| FuseError::format(path, e.to_string()))?;
            set.push(t).map_err(|e| FuseError::format(path, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(FuseError::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            step,
            config_hash,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| FuseError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FuseError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }
}
