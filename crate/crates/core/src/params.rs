//! Named parameter blocks and the binary file that stores them.
//!
//! Layout, all integers little-endian:
//! magic (4 bytes), version `u32`, architecture string (`u32` length +
//! UTF-8), parts `u32`, step `u64`, block count `u32`, then per block the
//! name (`u32` length + UTF-8), `u32` rank, `u32` dims and the `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { name: name.into(), dims, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub magic: [u8; 4],
    pub architecture: String,
    pub parts: u32,
    pub step: u64,
    pub blocks: Vec<ParamBlock>,
}

impl ParamFile {
    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// Bytes taken by everything except the `f64` payload.
    pub fn header_len(&self) -> usize {
        let fixed = 4 + 4 + 4 + self.architecture.len() + 4 + 8 + 4;
        fixed + self.blocks.iter().map(|b| 4 + b.name.len() + 4 + 4 * b.dims.len()).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + 8 * self.parameter_count());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.architecture);
        out.extend_from_slice(&self.parts.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: [u8; 4], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        let got: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if got != magic {
            return Err(Error::format(
                path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&got), String::from_utf8_lossy(&magic)),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let architecture = r.string()?;
        let parts = r.u32()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format(path, "block too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blocks.push(ParamBlock { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { magic, architecture, parts, step, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.encode()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, magic, path)
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamFile {
        ParamFile {
            magic: *b"TEST",
            architecture: "toy".into(),
            parts: 3,
            step: 42,
            blocks: vec![
                ParamBlock::new("a.weight", vec![2, 3], vec![0.5, -1.0, 2.0, f64::MIN_POSITIVE, 1e300, -0.0]),
                ParamBlock::new("a.bias", vec![2], vec![1.0, 2.0]),
            ],
        }
    }

    #[test]
    fn round_trip_and_size() {
        let f = sample();
        let bytes = f.encode();
        assert_eq!(bytes.len(), f.header_len() + 8 * 8);
        let back = ParamFile::decode(&bytes, *b"TEST", Path::new("x")).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.blocks[0].data[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = sample().encode();
        assert!(matches!(ParamFile::decode(&bytes, *b"PSEG", Path::new("x")), Err(Error::Format { .. })));
        assert!(matches!(ParamFile::decode(&bytes[..bytes.len() - 1], *b"TEST", Path::new("x")), Err(Error::Format { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(ParamFile::decode(&longer, *b"TEST", Path::new("x")), Err(Error::Format { .. })));
    }
}
