//! LSB-first bit packing into byte vectors.

use alloc::vec::Vec;

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub fn with_capacity(bits: usize) -> Self {
        Self { bytes: Vec::with_capacity(bits.div_ceil(8)), len: 0 }
    }

    /// Appends the low `width` bits of `value`, least significant first.
    pub fn push(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for i in 0..width {
            if self.len.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.len % 8);
            }
            self.len += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn at(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    /// Reads `width` bits; `None` past the end.
    pub fn read(&mut self, width: u32) -> Option<u64> {
        if self.pos + width as usize > self.bytes.len() * 8 {
            return None;
        }
        let mut v = 0u64;
        for i in 0..width {
            let p = self.pos + i as usize;
            v |= (((self.bytes[p / 8] >> (p % 8)) & 1) as u64) << i;
        }
        self.pos += width as usize;
        Some(v)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}
