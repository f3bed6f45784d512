//! Binary weight container shared by the generator (`I2SG`) and the feature
//! extractor (`I2VG`).
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic[4] version header[3] tensor_count
//! { name_len name[name_len] rank dims[rank] f32[prod(dims)] } * tensor_count
//! crc32
//! ```
//!
//! For `I2SG` the three header words are resolution, style_dim and the style
//! layer count. The CRC-32 covers every byte that precedes it.

use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_MAGIC: [u8; 4] = *b"I2SG";
pub const VGG_MAGIC: [u8; 4] = *b"I2VG";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_f64(name: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub header: [u32; 3],
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(magic: [u8; 4], header: [u32; 3]) -> Self {
        Self {
            magic,
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Fetches a tensor and checks its dimensions.
    pub fn tensor(&self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let t = self.find(name).ok_or_else(|| Error::Load {
            tensor: name.to_string(),
            reason: "missing from container".into(),
        })?;
        if t.dims != dims {
            return Err(Error::Load {
                tensor: name.to_string(),
                reason: format!("shape {:?}, expected {:?}", t.dims, dims),
            });
        }
        Ok(t.to_f64())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for h in self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 12 + 4 + 4 {
            return Err(Error::Corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let mut reader = Reader::new(payload);
        let found = reader.take(4, "magic")?;
        if found != magic {
            return Err(Error::Corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(&magic)
            )));
        }
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(payload) != stored_crc {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let version = reader.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let header = [reader.u32("header")?, reader.u32("header")?, reader.u32("header")?];
        let count = reader.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = reader.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(reader.take(name_len, "tensor name")?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = reader.u32(&name)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(reader.u32(&name)? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = reader.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if !reader.is_empty() {
            return Err(Error::Corrupt("trailing bytes after tensor manifest".into()));
        }
        Ok(Self { magic, header, tensors })
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            tensor: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, magic)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}
