//! Versioned little-endian parameter blobs.
//!
//! Layout: magic `PLNKPRM\0`, `u32` version, `u8` kind, `u32` n_tx,
//! `u32` n_rx, `u32` entry count, then per entry a `u32`-length-prefixed
//! UTF-8 name, `u32` rank, `u64` dims, `u64` value count and the `f64`
//! values.

use std::path::Path;

use super::DetectorKind;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLNKPRM\0";
pub const BLOB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters and buffers of a detector, detached from the live model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlob {
    pub kind: DetectorKind,
    pub n_tx: usize,
    pub n_rx: usize,
    pub entries: Vec<BlobEntry>,
}

fn kind_code(kind: DetectorKind) -> u8 {
    match kind {
        DetectorKind::DeepSic => 0,
        DetectorKind::BlackBoxMlp => 1,
        DetectorKind::ResidualConv => 2,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Compatibility("parameter blob is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl ParamBlob {
    /// Euclidean distance between two blobs of the same layout.
    pub fn distance(&self, other: &ParamBlob) -> Result<f64> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Compatibility("blob layouts differ".into()));
        }
        let mut sq = 0.0;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Compatibility(format!(
                    "entry {} vs {}",
                    a.name, b.name
                )));
            }
            sq += a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Ok(sq.sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(kind_code(self.kind));
        out.extend_from_slice(&(self.n_tx as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_rx as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Compatibility("not a parameter blob".into()));
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::Compatibility(format!(
                "blob version {version}, expected {BLOB_VERSION}"
            )));
        }
        let kind = match r.take(1)?[0] {
            0 => DetectorKind::DeepSic,
            1 => DetectorKind::BlackBoxMlp,
            2 => DetectorKind::ResidualConv,
            k => return Err(Error::Compatibility(format!("unknown detector code {k}"))),
        };
        let n_tx = r.u32()? as usize;
        let n_rx = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Compatibility("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = r.u64()? as usize;
            if n != shape.iter().product::<usize>() {
                return Err(Error::Compatibility(format!(
                    "entry {name} has {n} values for shape {shape:?}"
                )));
            }
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| {
                Error::Compatibility("entry too large".into())
            })?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(BlobEntry { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Compatibility("trailing bytes after blob".into()));
        }
        Ok(ParamBlob {
            kind,
            n_tx,
            n_rx,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParamBlob::from_bytes(&std::fs::read(path)?)
    }
}
