//! `SPRE` named-tensor checkpoint format.
//!
//! ```text
//! magic      4 bytes  "SPRE"
//! version    u16
//! count      u32
//! entries    count × {
//!     name_len u16, name (UTF-8),
//!     dtype u8 (0 = f32, 1 = f64, 2 = mask byte),
//!     ndim u8, dims ndim × u32,
//!     payload product(dims) × dtype size
//! }
//! ```
//!
//! All integers and floats are little-endian. Entry order is preserved.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{DType, Scalar};
use crate::tensor::{Mask4, Shape4, Tensor4};

pub const MAGIC: [u8; 4] = *b"SPRE";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"SPRE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint: need {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("entry name at offset {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("entry name `{0}` is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("entry `{name}`: unknown dtype code {code}")]
    UnknownDType { name: String, code: u8 },
    #[error("entry `{name}`: mask byte {value} is not 0 or 1")]
    NonBinaryMask { name: String, value: u8 },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("entry `{name}`: expected {expected}, found {actual}")]
    WrongKind {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Mask(Vec<u8>),
}

impl TensorData {
    pub fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::Mask(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::Mask(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn float_dtype(&self) -> Option<DType> {
        match self {
            TensorData::F32(_) => Some(DType::F32),
            TensorData::F64(_) => Some(DType::F64),
            TensorData::Mask(_) => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::Mask(_) => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Entry {
    pub fn mask(name: impl Into<String>, m: &Mask4) -> Self {
        Entry {
            name: name.into(),
            dims: m.shape().dims().into_iter().map(|d| d as u32).collect(),
            data: TensorData::Mask(m.bits().to_vec()),
        }
    }

    pub fn is_mask(&self) -> bool {
        matches!(self.data, TensorData::Mask(_))
    }

    pub fn shape4(&self) -> Option<Shape4> {
        match self.dims[..] {
            [a, b, c, d] => Some(Shape4::new(a as usize, b as usize, c as usize, d as usize)),
            _ => None,
        }
    }

    /// Float payload as `T`; the stored dtype must be `T::DTYPE`.
    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        let wrong = || CheckpointError::WrongKind {
            name: self.name.clone(),
            expected: format!("{:?}", T::DTYPE).to_lowercase(),
            actual: self.data.kind().to_string(),
        };
        match (&self.data, T::DTYPE) {
            (TensorData::F32(v), DType::F32) => Ok(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()),
            (TensorData::F64(v), DType::F64) => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            _ => Err(wrong()),
        }
    }
}

fn floats_of<T: Scalar>(values: &[T]) -> TensorData {
    match T::DTYPE {
        DType::F32 => TensorData::F32(values.iter().map(|x| x.as_f64() as f32).collect()),
        DType::F64 => TensorData::F64(values.iter().map(|x| x.as_f64()).collect()),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.contains(&entry.name) {
            return Err(CheckpointError::DuplicateName(entry.name));
        }
        if entry.name.len() > u16::MAX as usize {
            return Err(CheckpointError::NameTooLong(entry.name));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Inserts or replaces, keeping the original position on replace.
    pub fn upsert(&mut self, entry: Entry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn put_tensor4<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor4<T>) -> Result<()> {
        let s = t.shape();
        self.push(Entry {
            name: name.into(),
            dims: s.dims().into_iter().map(|d| d as u32).collect(),
            data: floats_of(t.data()),
        })
    }

    pub fn put_mask(&mut self, name: impl Into<String>, m: &Mask4) -> Result<()> {
        self.push(Entry::mask(name, m))
    }

    pub fn put_vector<T: Scalar>(&mut self, name: impl Into<String>, v: &[T]) -> Result<()> {
        self.push(Entry {
            name: name.into(),
            dims: vec![v.len() as u32],
            data: floats_of(v),
        })
    }

    pub fn put_matrix<T: Scalar>(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: &[T]) -> Result<()> {
        self.push(Entry {
            name: name.into(),
            dims: vec![rows as u32, cols as u32],
            data: floats_of(v),
        })
    }

    /// Small integer/real metadata stored as an f64 vector.
    pub fn put_meta(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.put_vector::<f64>(name, v)
    }

    pub fn tensor4<T: Scalar>(&self, name: &str) -> Result<Tensor4<T>> {
        let e = self.require(name)?;
        let shape = e.shape4().ok_or_else(|| CheckpointError::WrongKind {
            name: name.to_string(),
            expected: "rank-4 tensor".into(),
            actual: format!("rank {}", e.dims.len()),
        })?;
        let values = e.values::<T>()?;
        Tensor4::from_vec(shape, values).map_err(|err| CheckpointError::WrongKind {
            name: name.to_string(),
            expected: "finite tensor".into(),
            actual: err.to_string(),
        })
    }

    pub fn mask(&self, name: &str) -> Result<Mask4> {
        let e = self.require(name)?;
        let (shape, bits) = match (&e.data, e.shape4()) {
            (TensorData::Mask(bits), Some(shape)) => (shape, bits.clone()),
            _ => {
                return Err(CheckpointError::WrongKind {
                    name: name.to_string(),
                    expected: "rank-4 mask".into(),
                    actual: format!("{} of rank {}", e.data.kind(), e.dims.len()),
                })
            }
        };
        Mask4::from_bits(shape, bits).map_err(|_| CheckpointError::NonBinaryMask {
            name: name.to_string(),
            value: 2,
        })
    }

    pub fn vector<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        self.require(name)?.values::<T>()
    }

    pub fn meta(&self, name: &str) -> Result<Vec<f64>> {
        self.vector::<f64>(name)
    }

    /// Dtype of the first rank-4 float entry, falling back to the first
    /// float entry of any rank. Metadata is always `f64`, so weights decide.
    pub fn float_dtype(&self) -> Option<DType> {
        self.entries
            .iter()
            .filter(|e| e.dims.len() == 4)
            .find_map(|e| e.data.float_dtype())
            .or_else(|| self.entries.iter().find_map(|e| e.data.float_dtype()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::Mask(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::InvalidName(name_at))?
                .to_string();
            let code = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()?);
            }
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let elem = match code {
                0 => 4,
                1 => 8,
                2 => 1,
                _ => return Err(CheckpointError::UnknownDType { name, code }),
            };
            let nbytes = numel.and_then(|n| n.checked_mul(elem)).ok_or(CheckpointError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?;
            let payload = r.take(nbytes)?;
            let data = match code {
                0 => TensorData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
                1 => TensorData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
                _ => {
                    if let Some(&value) = payload.iter().find(|&&b| b > 1) {
                        return Err(CheckpointError::NonBinaryMask { name, value });
                    }
                    TensorData::Mask(payload.to_vec())
                }
            };
            ckpt.push(Entry { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(ckpt)
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
            f.write_all(&self.to_bytes()).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
