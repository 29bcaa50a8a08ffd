//! Little-endian section reader/writer shared by the checkpoint and packed formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// Length-prefixed `f32` array.
    pub fn array(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        self.f32s(v);
    }

    /// Four-byte tag, `u64` payload length, payload.
    pub fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.u64(payload.len() as u64);
        self.buf.extend_from_slice(payload);
    }
}

/// Payload builder for a single section.
pub(crate) fn payload(f: impl FnOnce(&mut Writer)) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    f(&mut w);
    w.buf
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute file offset of `buf[0]`, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            base: 0,
        }
    }

    pub fn offset(&self) -> u64 {
        (self.base + self.pos) as u64
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.saturating_mul(4))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Length-prefixed array whose length must equal `expected`.
    pub fn array(&mut self, expected: usize, what: &str) -> Result<Vec<f32>> {
        let at = self.offset();
        let n = self.u32()? as usize;
        if n != expected {
            return Err(Error::Format {
                offset: at,
                msg: format!("{what}: {n} values stored, architecture needs {expected}"),
            });
        }
        self.f32s(n)
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.take(4)? != magic {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            ));
        }
        let v = self.u32()?;
        if v != version {
            self.pos -= 4;
            return self.fail(format!("unsupported version {v}, expected {version}"));
        }
        Ok(())
    }

    /// Reads a section with the expected tag and returns a reader over its payload.
    pub fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let got = self.take(4)?;
        if got != tag {
            self.pos -= 4;
            return self.fail(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            ));
        }
        let len = self.u64()?;
        let len = usize::try_from(len).or_else(|_| self.fail("section length overflows"))?;
        let start = self.base + self.pos;
        let body = self.take(len)?;
        Ok(Reader {
            buf: body,
            pos: 0,
            base: start,
        })
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return self.fail(format!("{} trailing bytes", self.remaining()));
        }
        Ok(())
    }
}
