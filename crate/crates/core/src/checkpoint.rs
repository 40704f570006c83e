//! Versioned little-endian checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "RSTF"
//! version    u32       currently 1
//! kind       str       model tag, e.g. "cnn-lstm"
//! echo       u32 n, then n × (key str, value str)
//! iteration  u64
//! entries    u32 n, then n × entry
//!
//! str   = u32 byte length + UTF-8 bytes
//! entry = name str, dtype u8 (1 = f32, 2 = f64, 3 = u64),
//!         ndim u32, ndim × u64 dims, product(dims) × element bytes
//! ```
//!
//! Nothing may follow the last entry.

use std::path::Path;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RSTF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {found:?} (expected \"RSTF\")")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F32(_) => 1,
            EntryData::F64(_) => 2,
            EntryData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::PRECISION {
            crate::Precision::Single => EntryData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            crate::Precision::Double => EntryData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn words(name: impl Into<String>, words: Vec<u64>) -> Self {
        Entry {
            name: name.into(),
            shape: vec![words.len()],
            data: EntryData::U64(words),
        }
    }

    pub fn floats(name: impl Into<String>, values: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            shape: vec![values.len()],
            data: EntryData::F64(values),
        }
    }

    /// Float payload converted to `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, CheckpointError> {
        let data: Vec<T> = match &self.data {
            EntryData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            EntryData::U64(_) => {
                return Err(CheckpointError::Malformed(format!("{} holds integers, not floats", self.name)))
            }
        };
        Tensor::new(self.shape.clone(), data).map_err(|e| CheckpointError::Malformed(format!("{}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub echo: Vec<(String, String)>,
    pub iteration: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing entry {name}")))
    }

    pub fn words(&self, name: &str) -> Result<&[u64], CheckpointError> {
        match &self.entry(name)?.data {
            EntryData::U64(w) => Ok(w),
            _ => Err(CheckpointError::Malformed(format!("{name} is not an integer entry"))),
        }
    }

    pub fn floats(&self, name: &str) -> Result<&[f64], CheckpointError> {
        match &self.entry(name)?.data {
            EntryData::F64(w) => Ok(w),
            _ => Err(CheckpointError::Malformed(format!("{name} is not a double entry"))),
        }
    }

    pub fn echo_value(&self, key: &str) -> Result<&str, CheckpointError> {
        self.echo
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing config key {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.echo.len() as u32).to_le_bytes());
        for (k, v) in &self.echo {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(e.data.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { raw, pos: 0 };
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic { found: raw.to_vec() })?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let kind = r.string()?;
        let n_echo = r.u32()? as usize;
        let mut echo = Vec::with_capacity(n_echo.min(1024));
        for _ in 0..n_echo {
            echo.push((r.string()?, r.string()?));
        }
        let iteration = r.u64()?;
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries.min(1024));
        for _ in 0..n_entries {
            let name = r.string()?;
            let tag = r.u8()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
            let width = match tag {
                1 => 4,
                2 | 3 => 8,
                other => return Err(CheckpointError::Malformed(format!("{name}: unknown dtype {other}"))),
            };
            let bytes = r.take(count.checked_mul(width).ok_or(CheckpointError::Truncated { offset: r.pos })?)?;
            let data = match tag {
                1 => EntryData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => EntryData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => EntryData::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != raw.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after last entry",
                raw.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            echo,
            iteration,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&raw)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    raw: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.raw.len());
        match end {
            Some(end) => {
                let s = &self.raw[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { offset: self.pos }),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("invalid UTF-8 at byte {at}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "cnn-cnn".into(),
            echo: vec![("a".into(), "1".into()), ("lr".into(), "0.001".into())],
            iteration: 42,
            entries: vec![
                Entry::tensor("param/w", &Tensor::<f32>::new([2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap()),
                Entry::tensor("param/d", &Tensor::<f64>::new([3], vec![0.1, 0.2, 0.3]).unwrap()),
                Entry::words("rng/x", vec![u64::MAX, 0, 7]),
            ],
        }
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"RSTF");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let msg = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
    }
}
