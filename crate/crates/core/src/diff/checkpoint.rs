//! Named-parameter checkpoints.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   b"SSCK"
//! u32     version (1)
//! u32     entry count
//! entry*: u32 name length, name bytes (UTF-8),
//!         u8 dtype code (0 = f32, 1 = f64),
//!         u32 rank, u64 dim * rank,
//!         raw element data
//! ```
//!
//! A JSON manifest listing names, shapes and dtypes is written next to the
//! binary file with the extension `.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub entries: Vec<CheckpointEntry>,
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `params` atomically (temporary file, then rename).
pub fn save_checkpoint<F: Scalar>(path: &Path, params: &BTreeMap<String, Tensor<F>>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(F::DTYPE.code());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: F::DTYPE,
        });
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        entries,
    };
    write_file_atomic(path, &buf)?;
    write_file_atomic(
        &manifest_path(path),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
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
}

/// Reads a checkpoint, converting stored elements to `F` when the dtype differs.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<F>>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| Error::Format("unknown dtype code".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let data: Vec<F> = match dtype {
            DType::F32 => raw.chunks(4).map(|c| F::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|c| F::lit(f64::read_le(c))).collect(),
        };
        out.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}
