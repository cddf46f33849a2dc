//! Binary tensor container shared by checkpoints and cache files.
//!
//! ```text
//! MAGIC\n
//! key=value\n ...            (header, UTF-8, no '=' in keys, no newlines in values)
//! \n                         (blank line ends the header)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u8 dtype code, u8 trainable flag,
//!             u32 rank, u64 extents[rank], little-endian values
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::config::ModelConfig;
use super::params::ParamSet;
use super::Model;
use crate::error::{Error, Result};
use crate::numkernel::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &str = "UGCKPT1";
pub const CACHE_MAGIC: &str = "UGCACHE1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.to_le_bytes(),
            TensorData::F64(t) => t.to_le_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub magic: String,
    pub header: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(self.magic.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.header {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("header entry {k:?} cannot be encoded")));
            }
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().code());
            out.push(u8::from(t.trainable));
            let shape = t.data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data.bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line()?;
        if magic != expected_magic {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {expected_magic:?}")));
        }
        let mut header = Vec::new();
        loop {
            let line = r.line()?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line {line:?} has no '='")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::Format(format!("tensor {name}: unknown dtype code")))?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(Error::Format(format!("tensor {name}: bad flag {f}"))),
            };
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name}: extent overflow")))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(shape, f32::from_le_bytes_slice(r.take(numel * 4)?))?),
                DType::F64 => TensorData::F64(Tensor::new(shape, f64::from_le_bytes_slice(r.take(numel * 8)?))?),
            };
            tensors.push(NamedTensor { name, trainable, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            magic: magic.to_string(),
            header,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_magic: &str) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("unterminated header line".into()))?;
        let s = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        self.pos += nl + 1;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

impl<T: Element> Model<T> {
    pub fn to_checkpoint(&self) -> TensorFile {
        TensorFile {
            magic: CHECKPOINT_MAGIC.into(),
            header: self.config().to_pairs(),
            tensors: self
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    data: TensorData::from_tensor(&p.tensor),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(file: &TensorFile) -> Result<Self> {
        if file.magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint: {:?}", file.magic)));
        }
        let cfg = ModelConfig::from_pairs(file.header.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut set = ParamSet::new();
        for t in &file.tensors {
            set.insert(&t.name, t.data.to_tensor(), t.trainable);
        }
        Model::from_params(cfg, set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&TensorFile::load(path, CHECKPOINT_MAGIC)?)
    }
}
