//! Binary tensor (`FXT3`) and filter-set (`FXW4`) files.
//!
//! Both start with a 4-byte magic followed by three little-endian `u32`
//! dimensions; the payload is little-endian 16-bit words. A weights file for
//! a whole network is a concatenation of `FXW4` records, one per layer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{FilterSet, NetError, Tensor3D};
use crate::fxp::Fx16;

pub const TENSOR_MAGIC: [u8; 4] = *b"FXT3";
pub const FILTER_MAGIC: [u8; 4] = *b"FXW4";
pub const TENSOR_HEADER_BYTES: usize = 16;

fn write_header(out: &mut impl Write, magic: [u8; 4], dims: [usize; 3]) -> Result<(), NetError> {
    out.write_all(&magic)?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| NetError::Dims(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_words(out: &mut impl Write, words: &[Fx16]) -> Result<(), NetError> {
    let mut buf = Vec::with_capacity(words.len() * 2);
    for w in words {
        buf.extend_from_slice(&w.to_u16().to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Cursor over an in-memory file image.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn header(&mut self, magic: [u8; 4]) -> Result<[usize; 3], NetError> {
        if self.bytes.len() - self.pos < 16 {
            return Err(NetError::LengthMismatch {
                expected: 16,
                found: self.bytes.len() - self.pos,
            });
        }
        let found: [u8; 4] = self.bytes[self.pos..self.pos + 4].try_into().unwrap();
        if found != magic {
            return Err(NetError::BadMagic { expected: magic, found });
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let at = self.pos + 4 + 4 * i;
            *d = u32::from_le_bytes(self.bytes[at..at + 4].try_into().unwrap()) as usize;
        }
        self.pos += 16;
        Ok(dims)
    }

    fn words(&mut self, count: usize, total_expected: usize) -> Result<Vec<Fx16>, NetError> {
        let need = count * 2;
        if self.bytes.len() - self.pos < need {
            return Err(NetError::LengthMismatch {
                expected: total_expected,
                found: self.bytes.len(),
            });
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(2)
            .map(|c| Fx16::from_u16(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        self.pos += need;
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn write_tensor(out: &mut impl Write, t: &Tensor3D) -> Result<(), NetError> {
    write_header(out, TENSOR_MAGIC, [t.c, t.h, t.w])?;
    write_words(out, &t.data)
}

pub fn read_tensor(input: &mut impl Read) -> Result<Tensor3D, NetError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let [c, h, w] = r.header(TENSOR_MAGIC)?;
    let expected = TENSOR_HEADER_BYTES + c * h * w * 2;
    let data = r.words(c * h * w, expected)?;
    if !r.done() {
        return Err(NetError::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    Tensor3D::from_vec(c, h, w, data)
}

pub fn store_tensor(t: &Tensor3D, path: impl AsRef<Path>) -> Result<(), NetError> {
    let mut buf = Vec::with_capacity(TENSOR_HEADER_BYTES + t.data.len() * 2);
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor3D, NetError> {
    read_tensor(&mut fs::File::open(path)?)
}

pub fn write_filter_set(out: &mut impl Write, f: &FilterSet) -> Result<(), NetError> {
    write_header(out, FILTER_MAGIC, [f.m, f.k, f.kernel])?;
    write_words(out, &f.weights)?;
    write_words(out, &f.biases)
}

/// Read every `FXW4` record from `input`.
pub fn read_filter_set(input: &mut impl Read) -> Result<Vec<FilterSet>, NetError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let mut sets = Vec::new();
    while !r.done() {
        let record_start = r.pos;
        let [m, k, kernel] = r.header(FILTER_MAGIC)?;
        let n = m * k * kernel * kernel;
        let expected = record_start + 16 + (n + m) * 2;
        let weights = r.words(n, expected)?;
        let biases = r.words(m, expected)?;
        sets.push(FilterSet {
            m,
            k,
            kernel,
            weights,
            biases,
        });
    }
    Ok(sets)
}

pub fn store_filters(sets: &[FilterSet], path: impl AsRef<Path>) -> Result<(), NetError> {
    let mut buf = Vec::new();
    for f in sets {
        write_filter_set(&mut buf, f)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_filters(path: impl AsRef<Path>) -> Result<Vec<FilterSet>, NetError> {
    read_filter_set(&mut fs::File::open(path)?)
}
