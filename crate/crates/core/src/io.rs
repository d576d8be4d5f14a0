//! Little-endian binary helpers shared by the dataset and checkpoint formats.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn dims(&mut self, dims: &[usize]) -> Result<()> {
        self.u32(to_u32(dims.len())?);
        for &d in dims {
            self.u32(to_u32(d)?);
        }
        Ok(())
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::data(format!("dimension {v} exceeds u32")))
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], path: &Path) -> Self {
        ByteReader {
            data,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} available",
                self.remaining()
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4)?;
        if got != magic {
            self.pos = start;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(self.fail(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub(crate) const BLOB_MAGIC: &[u8; 4] = b"IRNE";
pub(crate) const BLOB_VERSION: u32 = 1;

pub(crate) enum Payload<'a> {
    F32(&'a [f32]),
    U8(&'a [u8]),
}

/// One array per file: magic, version, rank, dims, raw payload.
pub(crate) fn write_blob(path: &Path, dims: &[usize], payload: Payload<'_>) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(BLOB_MAGIC);
    w.u32(BLOB_VERSION);
    w.dims(dims)?;
    match payload {
        Payload::F32(v) => w.f32s(v),
        Payload::U8(v) => w.bytes(v),
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

fn read_blob_header<'a>(r: &mut ByteReader<'a>) -> Result<Vec<usize>> {
    r.expect_magic(BLOB_MAGIC)?;
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(r.fail(format!("unsupported blob version {version}")));
    }
    r.dims()
}

fn check_trailing(r: &ByteReader<'_>) -> Result<()> {
    if r.remaining() != 0 {
        return Err(r.fail(format!("{} trailing bytes", r.remaining())));
    }
    Ok(())
}

pub(crate) fn read_blob_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let dims = read_blob_header(&mut r)?;
    let values = r.f32s(dims.iter().product())?;
    check_trailing(&r)?;
    Ok((dims, values))
}

pub(crate) fn read_blob_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let dims = read_blob_header(&mut r)?;
    let values = r.take(dims.iter().product())?.to_vec();
    check_trailing(&r)?;
    Ok((dims, values))
}
