//! Little-endian binary primitives shared by every on-disk format.
//!
//! All index files start with a 4-byte magic followed by a `u32` format
//! version. Strings are a `u32` byte length followed by UTF-8 bytes.
//! Sequences are a `u64` element count followed by the elements.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Writer { inner }
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        self.inner.write_all(magic)?;
        self.u32(version)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn len(&mut self, n: usize) -> Result<()> {
        self.u64(n as u64)
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        let n = u32::try_from(s.len()).map_err(|_| Error::invalid("string longer than 4 GiB"))?;
        self.u32(n)?;
        Ok(self.inner.write_all(s.as_bytes())?)
    }

    pub fn u32s(&mut self, xs: &[u32]) -> Result<()> {
        self.len(xs.len())?;
        xs.iter().try_for_each(|&x| self.u32(x))
    }

    pub fn f32s(&mut self, xs: &[f32]) -> Result<()> {
        self.len(xs.len())?;
        xs.iter().try_for_each(|&x| self.f32(x))
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Reader { inner }
    }

    /// Checks the magic and returns the stored version, which must equal `version`.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let mut found = [0u8; 4];
        self.inner.read_exact(&mut found).map_err(truncated)?;
        if &found != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Version { found: v, expected: version });
        }
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Reads a sequence length. `max` guards against allocating on garbage.
    pub fn len(&mut self, max: usize) -> Result<usize> {
        let n = self.u64()?;
        if n > max as u64 {
            return Err(Error::Format(format!("length {n} exceeds limit {max}")));
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let mut buf = Vec::with_capacity(n.min(1 << 20));
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::Format("file is truncated".into()));
        }
        String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(MAX_ELEMS)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(MAX_ELEMS)?;
        (0..n).map(|_| self.f32()).collect()
    }

    /// Errors unless the stream is fully consumed.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

pub(crate) const MAX_ELEMS: usize = 1 << 34;
