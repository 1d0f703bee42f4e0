//! Internal helpers for the little-endian binary file formats.
//!
//! Readers track their byte offset so corruption and truncation errors can
//! name the position at which they were detected.

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            message: message.into(),
        }
    }

    pub(crate) fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.fail("unexpected end of file"))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub(crate) fn read_u16(&mut self) -> Result<u16> {
        let mut buf = [0u8; 2];
        self.read_exact(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }

    pub(crate) fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    /// Read `count` single-precision values, widened to `f64`.
    pub(crate) fn read_f32_values(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            self.read_exact(&mut buf)?;
            values.push(f64::from(f32::from_le_bytes(buf)));
        }
        Ok(values)
    }

    /// Validate a 4-byte magic at the current position.
    pub(crate) fn expect_magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset;
        let mut magic = [0u8; 4];
        self.read_exact(&mut magic)?;
        if &magic != expected {
            return Err(Error::Format {
                offset: at,
                message: format!("bad magic {magic:?}, expected {expected:?}"),
            });
        }
        Ok(())
    }

    /// Validate the format version at the current position.
    pub(crate) fn expect_version(&mut self, expected: u16) -> Result<()> {
        let at = self.offset;
        let version = self.read_u16()?;
        if version != expected {
            return Err(Error::Format {
                offset: at,
                message: format!("unsupported version {version}, expected {expected}"),
            });
        }
        Ok(())
    }

    /// Read a length-prefixed UTF-8 string with a sanity cap on the length.
    pub(crate) fn read_string(&mut self, max_len: u32) -> Result<String> {
        let len = self.read_u32()?;
        if len > max_len {
            return Err(self.fail(format!("implausible string length {len}")));
        }
        let at = self.offset;
        let mut bytes = vec![0u8; len as usize];
        self.read_exact(&mut bytes)?;
        String::from_utf8(bytes).map_err(|_| Error::Format {
            offset: at,
            message: "string is not valid UTF-8".into(),
        })
    }

    /// True when no bytes remain.
    pub(crate) fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(true),
            Ok(_) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Error unless the reader is exactly at end of file.
    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        if self.at_eof()? {
            Ok(())
        } else {
            Err(self.fail("trailing bytes after declared payload"))
        }
    }
}
