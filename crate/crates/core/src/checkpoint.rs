//! Binary tensor container used for training checkpoints and pretrained
//! feature-extractor weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CGANCKPT"
//! version      u32      FORMAT_VERSION
//! dtype        u8       bytes per element: 4 = f32, 8 = f64
//! digest       32 bytes SHA-256 of the config text
//! epoch        u64
//! seed         u64
//! step         u64
//! config_len   u32, then config_len bytes of UTF-8 config text
//! n_blocks     u32, then n_blocks times:
//!   name_len   u16, then name_len bytes of UTF-8 name
//!   ndim       u8, then ndim u64 dimensions
//!   data       prod(dims) elements of the header dtype, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 of a config text.
pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Lower-case hex rendering of a digest.
pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Decoded container. Tensors keep their on-disk order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile<F> {
    pub config_digest: [u8; 32],
    pub epoch: u64,
    pub seed: u64,
    pub step: u64,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> TensorFile<F> {
    pub fn new(config_text: impl Into<String>) -> Self {
        let config_text = config_text.into();
        Self {
            config_digest: config_digest(&config_text),
            epoch: 0,
            seed: 0,
            step: 0,
            config_text,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(F::DTYPE_TAG);
        out.extend_from_slice(&self.config_digest);
        for v in [self.epoch, self.seed, self.step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.ndim())
                .map_err(|_| Error::Checkpoint(format!("{name} has too many dimensions")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a container. Blocks stored in the other precision are
    /// converted element-wise.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != 4 && dtype != 8 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let (epoch, seed, step) = (r.u64()?, r.u64()?, r.u64()?);
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r.take(count.checked_mul(dtype as usize).ok_or_else(|| {
                Error::Checkpoint(format!("{name}: shape {shape:?} overflows"))
            })?)?;
            let values: Vec<F> = data
                .chunks_exact(dtype as usize)
                .map(|c| match dtype {
                    4 => F::lit(f32::read_le(c) as f64),
                    _ => F::lit(f64::read_le(c)),
                })
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("count matches shape");
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_digest,
            epoch,
            seed,
            step,
            config_text,
            tensors,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated file".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
