//! Bit-exact artifact persistence: the PRFT tensor container (24-byte header,
//! little-endian float32 payload) and atomic temp-then-rename file writes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PRFT";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u16 = 0;

/// A rank-N float32 tensor with row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(Error::invalid(format!(
                "tensor payload has {} values but dims {:?} require {expect}",
                data.len(),
                dims
            )));
        }
        Ok(TensorFile { dims, data })
    }

    /// Header (magic, version u16, dtype u16, rank u32, reserved u32, dims as
    /// u64) followed by the little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.dims.len() * 8 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes()); // reserved
        // header padding: magic(4) + version(2) + dtype(2) + rank(4) + reserved(4)
        // totals 16; pad to the documented 24-byte header
        out.extend_from_slice(&[0u8; 8]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::format("tensor file shorter than its header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format("bad magic: not a PRFT tensor file"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported tensor format version {version}")));
        }
        let dtype = u16::from_le_bytes([bytes[6], bytes[7]]);
        if dtype != DTYPE_F32_LE {
            return Err(Error::format(format!("unsupported dtype code {dtype}")));
        }
        let rank = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let dims_end = 24 + rank * 8;
        if bytes.len() < dims_end {
            return Err(Error::format("tensor file truncated in dims"));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let s = 24 + i * 8;
            dims.push(u64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
        }
        let count: u64 = dims.iter().product();
        let expect_len = dims_end as u64 + count * 4;
        if bytes.len() as u64 != expect_len {
            return Err(Error::format(format!(
                "tensor payload length {} does not match dims {:?}",
                bytes.len() - dims_end,
                dims
            )));
        }
        let mut data = Vec::with_capacity(count as usize);
        for i in 0..count as usize {
            let s = dims_end + i * 4;
            data.push(f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()));
        }
        Ok(TensorFile { dims, data })
    }
}

/// Writes bytes atomically: a temp file in the target directory, flushed,
/// then renamed over the destination.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("path {path:?} has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp.{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: &Path, tensor: &TensorFile) -> Result<()> {
    write_bytes_atomic(path, &tensor.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<TensorFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    TensorFile::from_bytes(&bytes)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
