//! Binary containers: 4-byte magic, `u32` version, `u32`-length-prefixed JSON
//! header, then little-endian payload arrays.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn i32s(&mut self, v: impl IntoIterator<Item = i32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bools(&mut self, v: impl IntoIterator<Item = bool>) {
        self.buf.extend(v.into_iter().map(u8::from));
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], path: &'a Path) -> Self {
        Self { data, pos: 0, path }
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        };
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.overflow())?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bools(&mut self, n: usize) -> Result<Vec<bool>> {
        let raw = self.take(n)?;
        raw.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::format(self.path, format!("mask byte {b}"))),
            })
            .collect()
    }

    fn overflow(&self) -> Error {
        Error::format(self.path, "array length overflow")
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }
}

pub(crate) fn encode<H: Serialize>(magic: &[u8; 4], version: u32, header: &H) -> Result<Writer> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Contract(e.to_string()))?;
    let mut w = Writer::default();
    w.bytes(magic);
    w.u32(version);
    w.u32(json.len() as u32);
    w.bytes(&json);
    Ok(w)
}

pub(crate) fn write(path: &Path, w: Writer) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, w.buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Checks magic and version and parses the header; the reader is left at the payload.
pub(crate) fn decode<'a, H: DeserializeOwned>(
    data: &'a [u8],
    path: &'a Path,
    magic: &[u8; 4],
    version: u32,
) -> Result<(H, Reader<'a>)> {
    let mut r = Reader::new(data, path);
    let m = r.take(4)?;
    if m != magic {
        return Err(r.error(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u32()?;
    if v != version {
        return Err(r.error(format!("unsupported version {v}, expected {version}")));
    }
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let header = serde_json::from_slice(json).map_err(|e| r.error(format!("header: {e}")))?;
    Ok((header, r))
}
