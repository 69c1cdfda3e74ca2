use super::DecodeError;
use crate::types::NodeSet;

/// Little-endian bit packer: bit `i` of a section lands in byte `i / 8`,
/// position `i % 8`.
#[derive(Default)]
pub struct BitWriter {
    buf: Vec<u8>,
    nbits: usize,
}

impl BitWriter {
    pub fn new() -> BitWriter {
        BitWriter::default()
    }

    pub fn push(&mut self, v: u64, width: usize) {
        for i in 0..width {
            if self.nbits % 8 == 0 {
                self.buf.push(0);
            }
            if v >> i & 1 == 1 {
                *self.buf.last_mut().unwrap() |= 1 << (self.nbits % 8);
            }
            self.nbits += 1;
        }
    }

    pub fn push_set(&mut self, s: NodeSet, n: usize) {
        self.push(s.0, n);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BitReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(buf: &'a [u8]) -> BitReader<'a> {
        BitReader { buf, pos: 0 }
    }

    pub fn read(&mut self, width: usize) -> Result<u64, DecodeError> {
        let mut v = 0u64;
        for i in 0..width {
            let byte = *self.buf.get(self.pos / 8).ok_or(DecodeError::Truncated)?;
            if byte >> (self.pos % 8) & 1 == 1 {
                v |= 1 << i;
            }
            self.pos += 1;
        }
        Ok(v)
    }

    pub fn read_set(&mut self, n: usize) -> Result<NodeSet, DecodeError> {
        self.read(n).map(NodeSet)
    }
}

pub fn bytes_for(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// Byte cursor over a body.
pub struct Cursor<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Cursor<'a> {
        Cursor { buf, pos: 0 }
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(len).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    /// Reads a bit section of `bits` bits occupying whole bytes.
    pub fn bits(&mut self, bits: usize) -> Result<BitReader<'a>, DecodeError> {
        let b = self.take(bytes_for(bits))?;
        Ok(BitReader::new(b))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack() {
        let mut w = BitWriter::new();
        w.push(0b101, 3);
        w.push(0x3ff, 10);
        w.push(1, 1);
        let b = w.finish();
        assert_eq!(b.len(), 2);
        let mut r = BitReader::new(&b);
        assert_eq!(r.read(3).unwrap(), 0b101);
        assert_eq!(r.read(10).unwrap(), 0x3ff);
        assert_eq!(r.read(1).unwrap(), 1);
        assert_eq!(r.read(2).unwrap(), 0);
        assert!(r.read(1).is_err());
    }

    #[test]
    fn first_bit_is_lsb() {
        let mut w = BitWriter::new();
        w.push(1, 1);
        assert_eq!(w.finish(), vec![1]);
    }
}
