//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "CTARCKPT"
//! version   u32      currently 1
//! family    u8       see ModelFamily
//! meta_len  u32      followed by meta_len bytes of UTF-8 JSON metadata
//! n_arrays  u32
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   ndim u32, ndim × u64 dims
//!   product(dims) × f64
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CTARCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    LogisticRegression,
    LinearSvm,
    FlowOnly,
    TbRater,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::LogisticRegression,
        ModelFamily::LinearSvm,
        ModelFamily::FlowOnly,
        ModelFamily::TbRater,
    ];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Short name used on the command line and in file names.
    pub fn short_name(self) -> &'static str {
        match self {
            ModelFamily::LogisticRegression => "lr",
            ModelFamily::LinearSvm => "svm",
            ModelFamily::FlowOnly => "flow",
            ModelFamily::TbRater => "tbrater",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.short_name() == s)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, ModelFamily::LogisticRegression | ModelFamily::LinearSvm)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown model family code {0}")]
    UnknownFamily(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub family: ModelFamily,
    /// Free-form JSON describing how to rebuild the model around the arrays.
    pub metadata: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(family: ModelFamily, metadata: String, params: &ParamStore) -> Self {
        Self {
            family,
            metadata,
            arrays: params.iter().map(|(_, n, t)| (n.to_owned(), t.clone())).collect(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every array into the parameter of the same name; names and shapes must match exactly.
    pub fn load_into(&self, params: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.arrays.len() != params.len() {
            return Err(CheckpointError::Invalid(format!(
                "checkpoint has {} arrays, model expects {}",
                self.arrays.len(),
                params.len()
            )));
        }
        for (name, t) in &self.arrays {
            let id = params
                .id(name)
                .ok_or_else(|| CheckpointError::Invalid(format!("unexpected array {name}")))?;
            let dst = params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(CheckpointError::Invalid(format!(
                    "array {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.family.code());
        put_bytes(&mut out, self.metadata.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let code = r.take(1, "family")?[0];
        let family = ModelFamily::from_code(code).ok_or(CheckpointError::UnknownFamily(code))?;
        let metadata = r.string("metadata")?;
        let n = r.u32("array count")?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string("array name")?;
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dims")? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Invalid(format!("array {name}: shape overflow")))?;
            let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated("data"))?, "data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Invalid(format!("array {name}: {e}")))?;
            arrays.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self {
            family,
            metadata,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| {
            CheckpointError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| {
            CheckpointError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Invalid(format!("{what} is not UTF-8")))
    }
}
