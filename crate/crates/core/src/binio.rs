//! Little-endian binary readers/writers shared by the file formats.
//!
//! The reader tracks its byte offset so malformed files are reported with
//! the position that failed to parse.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Reader {
    path: PathBuf,
    inner: BufReader<File>,
    offset: u64,
}

impl Reader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Reader {
            path: path.to_path_buf(),
            inner: BufReader::new(file),
            offset: 0,
        })
    }

    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(&self.path, self.offset, reason)
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            Error::format(&self.path, self.offset, format!("truncated {what}: {e}"))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, "magic")?;
        if &buf != expected {
            return Err(Error::format(
                &self.path,
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.read_exact(&mut buf, what)?;
        Ok(buf[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn f32_vec(&mut self, len: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; len * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64_vec(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; len * 8];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 1 << 20 {
            return Err(self.fail(format!("{what} length {len} is implausible")));
        }
        let mut bytes = vec![0u8; len];
        self.read_exact(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|e| self.fail(format!("{what} not UTF-8: {e}")))
    }

    /// Any trailing bytes mean the writer and reader disagree on the layout.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.fail("trailing bytes after final section")),
            Err(e) => Err(Error::format(&self.path, self.offset, e.to_string())),
        }
    }
}

pub(crate) struct Writer {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl Writer {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Writer {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        })
    }

    fn write_all(&mut self, buf: &[u8]) -> Result<()> {
        self.inner
            .write_all(buf)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.write_all(magic)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.write_all(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.write_all(&v.to_le_bytes())
    }

    pub fn f32_slice(&mut self, values: &[f32]) -> Result<()> {
        for v in values {
            self.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn f64_slice(&mut self, values: &[f64]) -> Result<()> {
        for v in values {
            self.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.write_all(s.as_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Write through a temp file in the same directory, then rename into place,
/// so readers never observe a half-written file.
pub(crate) fn atomic_write(
    path: &Path,
    write: impl FnOnce(&mut Writer) -> Result<()>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut writer = Writer::create(&tmp)?;
    write(&mut writer)?;
    writer.finish()?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
