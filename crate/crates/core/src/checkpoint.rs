//! Binary checkpoint format.
//!
//! ```text
//! magic            8 bytes   "FSDDCKPT"
//! version          u32       1
//! C                u64
//! M                u32
//! num_classes      u64
//! embed_dim        u64
//! num_layers       u64
//! num_heads        u64
//! mlp_ratio        u64
//! label_drop_prob  f64
//! step             u64
//! tensor_count     u32
//! per tensor:
//!   name_len u32, name (UTF-8), ndim u32, dims u64 x ndim, values f64 x prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Tensor names are grouped by prefix:
//! `params/`, `ema/`, `adam_m/` and `adam_v/`.

use std::path::Path;

use crate::codec::write_atomic;
use crate::error::{Error, Result};
use crate::net::{DenoiserConfig, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSDDCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub const PARAMS: &str = "params";
pub const EMA: &str = "ema";
pub const ADAM_M: &str = "adam_m";
pub const ADAM_V: &str = "adam_v";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(config: DenoiserConfig, step: u64) -> Self {
        Self {
            config,
            step,
            tensors: Vec::new(),
        }
    }

    pub fn push_group<S: Scalar>(&mut self, prefix: &str, store: &ParameterStore<S>) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.cast()));
        }
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Reassembles a parameter group in the layout order of `self.config`.
    pub fn group<S: Scalar>(&self, prefix: &str) -> Result<ParameterStore<S>> {
        let layout = self.config.parameter_layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, rows, cols) in layout {
            let full = format!("{prefix}/{name}");
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{full}`")))?;
            if t.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{full}` has shape {:?}, expected {:?}",
                    t.shape(),
                    (rows, cols)
                )));
            }
            names.push(name);
            tensors.push(t.cast());
        }
        Ok(ParameterStore::from_parts(names, tensors))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(c.codebook_size as u64).to_le_bytes());
        out.extend_from_slice(&c.total.to_le_bytes());
        for v in [c.num_classes, c.embed_dim, c.num_layers, c.num_heads, c.mlp_ratio] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.label_drop_prob.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let codebook_size = r.usize()?;
        let total = r.u32()?;
        let num_classes = r.usize()?;
        let embed_dim = r.usize()?;
        let num_layers = r.usize()?;
        let num_heads = r.usize()?;
        let mlp_ratio = r.usize()?;
        let label_drop_prob = r.f64()?;
        let config = DenoiserConfig {
            codebook_size,
            total,
            num_classes,
            embed_dim,
            num_layers,
            num_heads,
            mlp_ratio,
            label_drop_prob,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid config in header: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has {ndim} dims, expected 2")));
            }
            let rows = r.usize()?;
            let cols = r.usize()?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` truncated")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
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

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
