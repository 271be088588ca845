//! Little-endian binary container primitives shared by the embedding store,
//! the RIR cache and the model checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        ContainerWriter { buf }
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed (u16) UTF-8 string.
    pub fn put_str(&mut self, s: &str) -> Result<()> {
        let bytes = s.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Config(format!("id too long: {} bytes", bytes.len())));
        }
        self.buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(bytes);
        Ok(())
    }

    /// Length-prefixed (u32) UTF-8 block, for embedded JSON.
    pub fn put_block(&mut self, s: &str) {
        self.buf
            .extend_from_slice(&(s.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn put_f32_slice(&mut self, xs: &[f32]) {
        self.buf.reserve(xs.len() * 4);
        for &x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn write_to(self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.buf))
            .map_err(|e| Error::io(path, e))
    }
}

pub struct ContainerReader {
    path: std::path::PathBuf,
    buf: Vec<u8>,
    pos: usize,
}

impl ContainerReader {
    pub fn open(path: impl AsRef<Path>, magic: &[u8; 4], version: u32) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut buf = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(&path, e))?;
        let mut r = ContainerReader { path, buf, pos: 0 };
        let got_magic = r.take(4)?.to_vec();
        if got_magic != magic {
            return Err(Error::container(
                &r.path,
                format!("bad magic {:?}, expected {:?}", got_magic, magic),
            ));
        }
        let got_version = r.get_u32()?;
        if got_version != version {
            return Err(Error::container(
                &r.path,
                format!("unsupported version {got_version}, expected {version}"),
            ));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::container(&self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn get_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn get_str(&mut self) -> Result<String> {
        let b = self.take(2)?;
        let n = u16::from_le_bytes([b[0], b[1]]) as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| Error::container(&self.path, "invalid UTF-8 in id"))
    }

    pub fn get_block(&mut self) -> Result<String> {
        let n = self.get_u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| Error::container(&self.path, "invalid UTF-8 in block"))
    }

    pub fn get_f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All payload bytes must have been consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::container(
                &self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}
