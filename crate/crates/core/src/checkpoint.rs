//! Flat parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SCSMCKPT"
//! version  u32
//! count    u32
//! entry*   path_len u32 | path utf-8 | dtype u8 (0 = f64, 1 = f32)
//!          | ndim u32 | dims u64 * ndim | nbytes u64 | element bytes
//! ```

use std::path::Path;

use crate::error::{Result, ScsmError};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"SCSMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor(path: &str, t: &Tensor, dtype: DType) -> Self {
        let bytes = match dtype {
            DType::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F32 => t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        };
        Self { path: path.to_string(), dtype, shape: t.shape().to_vec(), bytes }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match self.dtype {
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub version: u32,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ScsmError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Archive {
    pub fn from_store(store: &ParamStore, dtype: DType) -> Self {
        Self {
            version: FORMAT_VERSION,
            entries: store.iter().map(|(_, p)| Entry::from_tensor(&p.path, &p.value, dtype)).collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(self.version.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.path.len() as u32).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
            out.push(e.dtype.tag());
            out.extend((e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend((e.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ScsmError::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ScsmError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let plen = r.u32()? as usize;
            let path = String::from_utf8(r.take(plen)?.to_vec())
                .map_err(|_| ScsmError::Format("non utf-8 parameter path".into()))?;
            let dtype = match r.u8()? {
                0 => DType::F64,
                1 => DType::F32,
                t => return Err(ScsmError::Format(format!("unknown dtype tag {t}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let nbytes = r.u64()? as usize;
            if nbytes != numel(&shape) * dtype.width() {
                return Err(ScsmError::Format(format!("byte count mismatch for {path}")));
            }
            let bytes = r.take(nbytes)?.to_vec();
            entries.push(Entry { path, dtype, shape, bytes });
        }
        if r.pos != buf.len() {
            return Err(ScsmError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { version, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ScsmError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| ScsmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| ScsmError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies every archived tensor whose path exists in `store`. Returns the
    /// store paths that had no archive entry.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.path.clone())).collect();
        for (id, path) in ids {
            match self.get(&path) {
                Some(e) => store.set_value(id, e.to_tensor()?)?,
                None => missing.push(path),
            }
        }
        Ok(missing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::from_fn(&[2, 3], |i| (i as f64).sqrt() * 1e-7), ParamGroup::Backbone);
        store.add("b", Tensor::from_fn(&[5], |i| -(i as f64) / 3.0), ParamGroup::Head);
        let ar = Archive::from_store(&store, DType::F64);
        let back = Archive::from_bytes(&ar.to_bytes()).unwrap();
        assert_eq!(ar, back);
        let mut fresh = store.clone();
        for (id, _) in store.iter() {
            fresh.set_value(id, Tensor::zeros(store.value(id).shape())).unwrap();
        }
        assert!(back.load_into(&mut fresh).unwrap().is_empty());
        assert_eq!(fresh.checksum(), store.checksum());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(Archive::from_bytes(b"NOTACKPT").is_err());
        let ar = Archive { version: FORMAT_VERSION, entries: vec![] };
        let mut bytes = ar.to_bytes();
        bytes.push(0);
        assert!(Archive::from_bytes(&bytes).is_err());
    }
}
