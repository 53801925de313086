//! Little-endian binary primitives shared by every file format, plus the
//! `DLQM` matrix record: magic, `u32` rows, `u32` cols, then `rows × cols`
//! `f64` values in row-major order.

use std::io::{Read, Write};

use super::Matrix;
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"DLQM";

pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
        self.u32(v)
    }

    pub fn i32(&mut self, v: i32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.bytes(s.as_bytes())
    }

    pub fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.bytes(MATRIX_MAGIC)?;
        self.len(m.rows())?;
        self.len(m.cols())?;
        for &v in m.data() {
            self.f64(v)?;
        }
        Ok(())
    }
}

pub struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated input".into()),
            _ => Error::Io(e),
        })
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.fill(&mut buf)?;
        Ok(buf[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    /// Reads a length prefix.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn i32(&mut self) -> Result<i32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(i32::from_le_bytes(buf))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Format("name is not utf-8".into()))
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        self.magic(MATRIX_MAGIC)?;
        let rows = self.len()?;
        let cols = self.len()?;
        let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
    }

    /// True when no bytes remain.
    pub fn at_eof(&mut self) -> Result<bool> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf)? {
            0 => Ok(true),
            _ => Err(Error::Format("trailing bytes after last record".into())),
        }
    }
}

/// Serialises a matrix to a standalone `DLQM` byte buffer.
pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut w = BinWriter::new(Vec::new());
    w.matrix(m).expect("writing to a Vec cannot fail");
    w.into_inner()
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = BinReader::new(bytes);
    let m = r.matrix()?;
    r.at_eof()?;
    Ok(m)
}
