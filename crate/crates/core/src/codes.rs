//! Bit-packed binary code storage and the `BNC1` on-disk format.
//!
//! Bit `j` of a code lives in byte `j / 8` at position `j % 8` (LSB first).
//! Bits past `k` in the last byte are padding and must be zero.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "BNC1" | N: u32 | k: u32 | N * ceil(k/8) packed bytes |
//! N * (label count: LEB128 varint | count * u16 label id)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::labels::LabelSet;

pub const CODE_MAGIC: &[u8; 4] = b"BNC1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodeMatrix {
    count: usize,
    bits: usize,
    bytes: Vec<u8>,
    labels: Vec<LabelSet>,
}

pub fn bytes_per_code(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// Mask of the valid bits in the final byte of a code.
pub(crate) fn tail_mask(bits: usize) -> u8 {
    match bits % 8 {
        0 => 0xFF,
        r => (1u8 << r) - 1,
    }
}

impl PackedCodeMatrix {
    /// Wraps already packed rows. Lengths are checked here; padding hygiene
    /// is checked by [`PackedCodeMatrix::validate`], which index construction
    /// and file reading both run.
    pub fn from_packed(bits: usize, bytes: Vec<u8>, labels: Vec<LabelSet>) -> Result<Self> {
        if bits == 0 {
            return Err(Error::data("code length must be positive"));
        }
        let stride = bytes_per_code(bits);
        if !bytes.len().is_multiple_of(stride) {
            return Err(Error::dim(format!(
                "{} packed bytes is not a multiple of {stride} bytes per {bits}-bit code",
                bytes.len()
            )));
        }
        let count = bytes.len() / stride;
        if labels.len() != count {
            return Err(Error::dim(format!(
                "{} label sets for {count} codes",
                labels.len()
            )));
        }
        Ok(PackedCodeMatrix {
            count,
            bits,
            bytes,
            labels,
        })
    }

    /// Packs rows of booleans; every row must have the same length.
    pub fn from_bits<R: AsRef<[bool]>>(rows: &[R]) -> Result<Self> {
        let bits = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.is_empty() || bits == 0 {
            return Err(Error::data("cannot pack an empty code set"));
        }
        let stride = bytes_per_code(bits);
        let mut bytes = vec![0u8; rows.len() * stride];
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != bits {
                return Err(Error::dim(format!(
                    "row {i} has {} bits, expected {bits}",
                    row.len()
                )));
            }
            pack_into(row, &mut bytes[i * stride..(i + 1) * stride]);
        }
        let labels = vec![LabelSet::default(); rows.len()];
        PackedCodeMatrix::from_packed(bits, bytes, labels)
    }

    pub fn with_labels(mut self, labels: Vec<LabelSet>) -> Result<Self> {
        if labels.len() != self.count {
            return Err(Error::dim(format!(
                "{} label sets for {} codes",
                labels.len(),
                self.count
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn stride(&self) -> usize {
        bytes_per_code(self.bits)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn code(&self, i: usize) -> &[u8] {
        let s = self.stride();
        &self.bytes[i * s..(i + 1) * s]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.code(i)[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    /// Checks that every padding bit is zero.
    pub fn validate(&self) -> Result<()> {
        let mask = !tail_mask(self.bits);
        let s = self.stride();
        for i in 0..self.count {
            if self.bytes[i * s + s - 1] & mask != 0 {
                return Err(Error::Integrity(format!(
                    "code {i} has non-zero padding bits beyond bit {}",
                    self.bits
                )));
            }
        }
        Ok(())
    }

    /// Flips every valid bit of every code, leaving padding zero.
    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        let s = self.stride();
        let tail = tail_mask(self.bits);
        for (i, b) in out.bytes.iter_mut().enumerate() {
            *b = !*b;
            if i % s == s - 1 {
                *b &= tail;
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = u32::try_from(self.count).map_err(|_| Error::data("too many codes"))?;
        let k = u32::try_from(self.bits).map_err(|_| Error::data("code length too large"))?;
        w.write_all(CODE_MAGIC)?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&k.to_le_bytes())?;
        w.write_all(&self.bytes)?;
        write_label_block(&mut w, &self.labels)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Cursor::new(r);
        let magic = r.take::<4>()?;
        if &magic != CODE_MAGIC {
            return Err(Error::format(0, "missing BNC1 magic"));
        }
        let count = u32::from_le_bytes(r.take::<4>()?) as usize;
        let bits = u32::from_le_bytes(r.take::<4>()?) as usize;
        if bits == 0 {
            return Err(Error::format(8, "code length must be positive"));
        }
        let mut bytes = vec![0u8; count * bytes_per_code(bits)];
        r.read_exact(&mut bytes)?;
        let labels = read_label_block(&mut r, count)?;
        r.expect_end()?;
        let m = PackedCodeMatrix::from_packed(bits, bytes, labels)?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        PackedCodeMatrix::read_from(bytes)
    }
}

/// Packs a bool slice LSB-first into `out`, which must hold `ceil(len/8)` bytes.
pub fn pack_into(bits: &[bool], out: &mut [u8]) {
    out.iter_mut().for_each(|b| *b = 0);
    for (j, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[j / 8] |= 1 << (j % 8);
    }
}

pub(crate) fn write_label_block<W: Write>(w: &mut W, labels: &[LabelSet]) -> Result<()> {
    for set in labels {
        write_varint(w, set.len() as u64)?;
        for &id in set.ids() {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_label_block<R: Read>(r: &mut Cursor<R>, count: usize) -> Result<Vec<LabelSet>> {
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.varint()?;
        let ids = (0..n)
            .map(|_| r.take::<2>().map(u16::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        labels.push(LabelSet::new(ids));
    }
    Ok(labels)
}

fn write_varint<W: Write>(w: &mut W, mut v: u64) -> Result<()> {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            w.write_all(&[byte])?;
            return Ok(());
        }
        w.write_all(&[byte | 0x80])?;
    }
}

/// Byte reader that tracks its offset for format errors.
pub(crate) struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    pub(crate) fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    pub(crate) fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::format(self.offset, "unexpected end of file")
            }
            _ => Error::Io(e),
        })?;
        self.offset += buf.len();
        Ok(())
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn varint(&mut self) -> Result<u64> {
        let start = self.offset;
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let [b] = self.take::<1>()?;
            v |= u64::from(b & 0x7F) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::format(start, "varint longer than 64 bits"))
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::format(
                self.offset,
                "trailing bytes after label block",
            )),
        }
    }
}
