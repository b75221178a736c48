//! Packed MSB-first bit stream.

use alloc::vec::Vec;

use num_bigint::BigUint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BitError {
    #[error("read of {requested} bits at offset {offset} passes the end ({len} bits)")]
    OutOfBits { offset: usize, requested: usize, len: usize },
    #[error("value needs {needed} bits but the field is {width} bits wide")]
    Overflow { needed: u64, width: usize },
}

/// An owned bit sequence. Bits are packed big-endian within each byte; bits
/// past `len` in the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct BitBuf {
    bytes: Vec<u8>,
    len: usize,
}

impl BitBuf {
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Option<Self> {
        if len > bytes.len() * 8 || bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut buf = Self { bytes, len };
        let spare = buf.bytes.len() * 8 - len;
        if let Some(last) = buf.bytes.last_mut() {
            *last &= 0xFFu8.checked_shl(spare as u32).unwrap_or(0);
        }
        Some(buf)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len);
        self.bytes[i / 8] ^= 1 << (7 - i % 8);
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader { buf: self, cursor: 0 }
    }
}

#[derive(Debug, Default)]
pub struct BitWriter {
    buf: BitBuf,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.buf.len
    }

    pub fn is_empty(&self) -> bool {
        self.buf.len == 0
    }

    pub fn push_bit(&mut self, bit: bool) {
        let i = self.buf.len;
        if i % 8 == 0 {
            self.buf.bytes.push(0);
        }
        if bit {
            self.buf.bytes[i / 8] |= 1 << (7 - i % 8);
        }
        self.buf.len += 1;
    }

    /// Writes the low `width` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, width: usize) {
        assert!(width <= 64);
        if width < 64 {
            debug_assert!(value >> width == 0, "value wider than field");
        }
        let mut remaining = width;
        while remaining > 0 {
            let used = self.buf.len % 8;
            if used == 0 {
                self.buf.bytes.push(0);
            }
            let room = 8 - used;
            let take = room.min(remaining);
            let chunk = ((value >> (remaining - take)) & ((1u64 << take) - 1)) as u8;
            let last = self.buf.bytes.len() - 1;
            self.buf.bytes[last] |= chunk << (room - take);
            self.buf.len += take;
            remaining -= take;
        }
    }

    pub fn write_f32(&mut self, value: f32) {
        self.write_bits(value.to_bits() as u64, 32);
    }

    /// Writes `value` as an unsigned integer of exactly `width` bits.
    pub fn write_biguint(&mut self, value: &BigUint, width: usize) -> Result<(), BitError> {
        let needed = value.bits();
        if needed > width as u64 {
            return Err(BitError::Overflow { needed, width });
        }
        let digits = value.to_u64_digits();
        // Leading zero padding, then digits from the most significant.
        let mut lead = width - needed as usize;
        while lead >= 64 {
            self.write_bits(0, 64);
            lead -= 64;
        }
        if lead > 0 {
            self.write_bits(0, lead);
        }
        if let Some((top, rest)) = digits.split_last() {
            let top_width = needed as usize - 64 * rest.len();
            self.write_bits(*top, top_width);
            for d in rest.iter().rev() {
                self.write_bits(*d, 64);
            }
        }
        Ok(())
    }

    pub fn append(&mut self, other: &BitBuf) {
        let mut r = other.reader();
        while r.remaining() >= 64 {
            let v = r.read_bits(64).expect("length checked");
            self.write_bits(v, 64);
        }
        let rest = r.remaining();
        let v = r.read_bits(rest).expect("length checked");
        self.write_bits(v, rest);
    }

    pub fn finish(self) -> BitBuf {
        self.buf
    }
}

/// Cursor over a [`BitBuf`]; never reads past its length.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    buf: &'a BitBuf,
    cursor: usize,
}

impl BitReader<'_> {
    pub fn position(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.buf.len - self.cursor
    }

    fn check(&self, width: usize) -> Result<(), BitError> {
        if width > self.remaining() {
            return Err(BitError::OutOfBits { offset: self.cursor, requested: width, len: self.buf.len });
        }
        Ok(())
    }

    pub fn read_bits(&mut self, width: usize) -> Result<u64, BitError> {
        assert!(width <= 64);
        self.check(width)?;
        let mut value = 0u64;
        let mut remaining = width;
        while remaining > 0 {
            let byte = self.buf.bytes[self.cursor / 8];
            let used = self.cursor % 8;
            let room = 8 - used;
            let take = room.min(remaining);
            let chunk = (byte >> (room - take)) & (((1u16 << take) - 1) as u8);
            value = if take == 64 { chunk as u64 } else { (value << take) | chunk as u64 };
            self.cursor += take;
            remaining -= take;
        }
        Ok(value)
    }

    pub fn read_f32(&mut self) -> Result<f32, BitError> {
        Ok(f32::from_bits(self.read_bits(32)? as u32))
    }

    pub fn read_biguint(&mut self, width: usize) -> Result<BigUint, BitError> {
        self.check(width)?;
        let mut digits = Vec::with_capacity(width.div_ceil(64));
        let head = width % 64;
        if head > 0 {
            digits.push(self.read_bits(head)?);
        }
        for _ in 0..width / 64 {
            digits.push(self.read_bits(64)?);
        }
        digits.reverse();
        Ok(BigUint::from_slice(&u64_to_u32(&digits)))
    }
}

fn u64_to_u32(digits: &[u64]) -> Vec<u32> {
    digits.iter().flat_map(|d| [*d as u32, (*d >> 32) as u32]).collect()
}
