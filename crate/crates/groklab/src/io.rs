//! Little-endian binary readers/writers with offset tracking, shared by the
//! checkpoint and optimizer-state formats so corrupt files can be reported
//! with the exact failing offset.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Wraps a writer and counts bytes, so sections can record their offsets.
pub struct ByteWriter<W: Write> {
    inner: W,
    path: PathBuf,
    offset: u64,
}

impl<W: Write> ByteWriter<W> {
    pub fn new(inner: W, path: &Path) -> Self {
        ByteWriter {
            inner,
            path: path.to_path_buf(),
            offset: 0,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn write_u32(&mut self, v: u32) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_u64(&mut self, v: u64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_f64(&mut self, v: f64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        // One pass through a byte buffer beats per-element write calls.
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.write_bytes(&buf)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.inner)
    }
}

/// Wraps a reader and counts bytes; EOF or garbage turns into a
/// `CorruptFile` error naming the file and offset.
pub struct ByteReader<R: Read> {
    inner: R,
    path: PathBuf,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        ByteReader {
            inner,
            path: path.to_path_buf(),
            offset: 0,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn corrupt(&self, what: impl Into<String>) -> Error {
        Error::CorruptFile {
            path: self.path.clone(),
            offset: self.offset,
            what: what.into(),
        }
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.corrupt(format!("unexpected end of file reading {} bytes", buf.len())))
            }
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn read_f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        self.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Fails if any bytes remain, catching truncated-write / wrong-file
    /// mixups where the header happened to parse.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.corrupt("trailing bytes after expected end of file")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_scalars_and_slices() {
        let path = Path::new("mem");
        let mut w = ByteWriter::new(Vec::new(), path);
        w.write_u32(7).unwrap();
        w.write_u64(u64::MAX).unwrap();
        w.write_f64(-0.125).unwrap();
        w.write_f64_slice(&[1.5, f64::MIN_POSITIVE, -0.0]).unwrap();
        assert_eq!(w.offset(), 4 + 8 + 8 + 24);
        let buf = w.finish().unwrap();

        let mut r = ByteReader::new(&buf[..], path);
        assert_eq!(r.read_u32().unwrap(), 7);
        assert_eq!(r.read_u64().unwrap(), u64::MAX);
        assert_eq!(r.read_f64().unwrap(), -0.125);
        let vs = r.read_f64_vec(3).unwrap();
        assert_eq!(vs, vec![1.5, f64::MIN_POSITIVE, -0.0]);
        assert!(vs[2].is_sign_negative()); // bit-exact, not just value-equal
        r.expect_eof().unwrap();
    }

    #[test]
    fn truncated_read_reports_offset() {
        let path = Path::new("mem");
        let mut r = ByteReader::new(&[1u8, 2, 3][..], path);
        let err = r.read_u64().unwrap_err();
        match err {
            Error::CorruptFile { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_detected() {
        let path = Path::new("mem");
        let mut r = ByteReader::new(&[0u8; 5][..], path);
        r.read_u32().unwrap();
        assert!(r.expect_eof().is_err());
    }
}
