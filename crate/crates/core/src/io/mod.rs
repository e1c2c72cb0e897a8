//! On-disk container formats.
//!
//! Both formats are little-endian, self-describing, and decoded defensively:
//! every length field is capped and checked against the remaining input
//! before any allocation, so arbitrary bytes fail cleanly.

mod checkpoint;
mod rollout_file;

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, write_checkpoint_bytes,
};
pub use rollout_file::{decode_rollout, load_rollout, save_rollout, write_rollout_bytes};

use crate::{Error, Result};

/// Cursor over untrusted bytes. All reads bounds-check and report the offset
/// on failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, off: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.off
    }

    pub fn is_done(&self) -> bool {
        self.off == self.buf.len()
    }

    fn fail(&self, what: &str) -> Error {
        Error::Format(format!("truncated input: {what} at byte {}", self.off))
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(what));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| self.fail(what))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// A length field that must not exceed `cap` nor promise more bytes than
    /// remain.
    pub fn len_capped(&mut self, cap: usize, unit_bytes: usize, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        if n > cap as u64 {
            return Err(Error::Format(format!("{what} {n} exceeds cap {cap}")));
        }
        let n = n as usize;
        if n.saturating_mul(unit_bytes) > self.remaining() {
            return Err(self.fail(what));
        }
        Ok(n)
    }
}

pub(crate) fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}
