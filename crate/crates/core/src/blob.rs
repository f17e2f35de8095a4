//! Self-describing binary container for named tensors.
//!
//! One format serves both preprocessed pillar tensors and model
//! checkpoints. Layout, all little-endian:
//!
//! ```text
//! magic  "GSEB"        4 bytes
//! version u32          currently 1
//! config_hash u64      content hash of the producing run config
//! seed  u64            RNG seed the artifact was produced with
//! count u32            number of entries
//! entry:
//!   name_len u16, name utf-8
//!   dtype u8           0 = f32, 1 = f64, 2 = u32, 3 = u8
//!   ndim u8, dims u64 * ndim
//!   payload            product(dims) elements, little-endian
//! ```
//!
//! Writes go through a temporary file in the target directory followed by a
//! rename, so readers never observe a partially written artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"GSEB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic, not a tensor blob")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("malformed blob: {0}")]
    Malformed(String),
    #[error("entry {0:?} not found")]
    Missing(String),
    #[error("entry {name:?} has dtype {got:?}, expected {expected:?}")]
    Dtype {
        name: String,
        got: Dtype,
        expected: Dtype,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U32 => 2,
            Dtype::U8 => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self, BlobError> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U32),
            3 => Ok(Dtype::U8),
            other => Err(BlobError::Malformed(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    /// Raw little-endian payload.
    data: Vec<u8>,
}

impl Entry {
    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }
}

/// A named-tensor archive. Entries keep insertion-independent, sorted-name
/// order on disk so equal contents serialize to equal bytes.
#[derive(Debug, Clone, Default)]
pub struct Blob {
    pub config_hash: u64,
    pub seed: u64,
    entries: BTreeMap<String, Entry>,
}

impl Blob {
    pub fn new(config_hash: u64, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn put_f32(&mut self, name: &str, dims: &[usize], values: &[f32]) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.insert(name, Dtype::F32, dims, data);
    }

    pub fn put_f64(&mut self, name: &str, dims: &[usize], values: &[f64]) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * 8);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.insert(name, Dtype::F64, dims, data);
    }

    pub fn put_u32(&mut self, name: &str, dims: &[usize], values: &[u32]) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.insert(name, Dtype::U32, dims, data);
    }

    pub fn put_u8(&mut self, name: &str, dims: &[usize], values: &[u8]) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        self.insert(name, Dtype::U8, dims, values.to_vec());
    }

    fn insert(&mut self, name: &str, dtype: Dtype, dims: &[usize], data: Vec<u8>) {
        self.entries.insert(
            name.to_string(),
            Entry {
                dtype,
                dims: dims.to_vec(),
                data,
            },
        );
    }

    pub fn get_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>), BlobError> {
        let e = self.checked(name, Dtype::F32)?;
        let vals = e
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((e.dims.clone(), vals))
    }

    pub fn get_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>), BlobError> {
        let e = self.checked(name, Dtype::F64)?;
        let vals = e
            .data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((e.dims.clone(), vals))
    }

    pub fn get_u32(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>), BlobError> {
        let e = self.checked(name, Dtype::U32)?;
        let vals = e
            .data
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((e.dims.clone(), vals))
    }

    pub fn get_u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>), BlobError> {
        let e = self.checked(name, Dtype::U8)?;
        Ok((e.dims.clone(), e.data.clone()))
    }

    fn checked(&self, name: &str, dtype: Dtype) -> Result<&Entry, BlobError> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| BlobError::Missing(name.to_string()))?;
        if e.dtype != dtype {
            return Err(BlobError::Dtype {
                name: name.to_string(),
                got: e.dtype,
                expected: dtype,
            });
        }
        Ok(e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BlobError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(BlobError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(BlobError::Version(version));
        }
        let config_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| BlobError::Malformed(format!("entry name not utf-8: {e}")))?
                .to_string();
            let dtype = Dtype::from_code(r.take(1)?[0])?;
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let payload = dims.iter().product::<usize>() * dtype.size();
            let data = r.take(payload)?.to_vec();
            entries.insert(name, Entry { dtype, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(BlobError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_hash,
            seed,
            entries,
        })
    }

    /// Atomic save: write to a sibling temp file, fsync, rename into place.
    pub fn save(&self, path: &Path) -> Result<(), BlobError> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| BlobError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BlobError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BlobError> {
        if self.pos + n > self.buf.len() {
            return Err(BlobError::Malformed(format!(
                "truncated at byte {} wanting {n} more",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut b = Blob::new(0xDEADBEEF, 42);
        b.put_f32("w", &[2, 3], &[1.0, 2.0, 3.5, -0.25, 0.0, 9.0]);
        b.put_f64("stats", &[2], &[0.123456789, -7.5]);
        b.put_u32("counts", &[4], &[0, 1, 2, u32::MAX]);
        b.put_u8("mask", &[3], &[0, 1, 1]);
        let bytes = b.to_bytes();
        let back = Blob::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config_hash, 0xDEADBEEF);
        assert_eq!(back.seed, 42);
        let (dims, w) = back.get_f32("w").unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(w, vec![1.0, 2.0, 3.5, -0.25, 0.0, 9.0]);
        let (_, m) = back.get_u8("mask").unwrap();
        assert_eq!(m, vec![0, 1, 1]);
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let mut a = Blob::new(1, 2);
        a.put_f32("alpha", &[1], &[1.0]);
        a.put_f32("beta", &[1], &[2.0]);
        let mut b = Blob::new(1, 2);
        b.put_f32("beta", &[1], &[2.0]);
        b.put_f32("alpha", &[1], &[1.0]);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("t.blob");
        let mut b = Blob::new(7, 9);
        b.put_f32("x", &[3], &[1.0, f32::MIN_POSITIVE, -1.5e30]);
        b.save(&path).unwrap();
        let back = Blob::load(&path).unwrap();
        assert_eq!(back.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Blob::from_bytes(b"nope"), Err(BlobError::BadMagic)));
        let mut good = Blob::new(0, 0);
        good.put_f32("x", &[1], &[1.0]);
        let mut bytes = good.to_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            Blob::from_bytes(&bytes),
            Err(BlobError::Malformed(_))
        ));
        let mut extra = good.to_bytes();
        extra.push(0);
        assert!(matches!(
            Blob::from_bytes(&extra),
            Err(BlobError::Malformed(_))
        ));
    }

    #[test]
    fn dtype_and_missing_errors() {
        let mut b = Blob::new(0, 0);
        b.put_f32("x", &[1], &[1.0]);
        assert!(matches!(b.get_f64("x"), Err(BlobError::Dtype { .. })));
        assert!(matches!(b.get_f32("y"), Err(BlobError::Missing(_))));
    }
}
