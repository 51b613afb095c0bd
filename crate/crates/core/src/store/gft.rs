//! GFT1 binary matrix format.
//!
//! Little-endian layout:
//!
//! | bytes  | content                            |
//! |--------|------------------------------------|
//! | 0..4   | magic `GFT1`                       |
//! | 4      | dtype code (0 = f32, 1 = f64)      |
//! | 5..8   | reserved, zero                     |
//! | 8..16  | rows (u64)                         |
//! | 16..24 | cols (u64)                         |
//! | 24..   | payload, row-major                 |
//!
//! Blocks can also be embedded back to back in larger containers; see
//! [`write_block`] and [`read_block`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Matrix, Result};

pub const MAGIC: [u8; 4] = *b"GFT1";
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serialize `m` as one GFT1 block into `w`.
pub fn write_block<W: Write>(w: &mut W, m: &Matrix, dtype: Dtype) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::NonFiniteValue("matrix"));
    }
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = dtype.code();
    header[8..16].copy_from_slice(&(m.rows() as u64).to_le_bytes());
    header[16..24].copy_from_slice(&(m.cols() as u64).to_le_bytes());

    let mut payload = Vec::with_capacity(m.as_slice().len() * dtype.size());
    match dtype {
        Dtype::F32 => {
            for &v in m.as_slice() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFiniteValue("matrix (f32 overflow)"));
                }
                payload.extend_from_slice(&f.to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&header)?;
    w.write_all(&payload)?;
    Ok(())
}

/// Read one GFT1 block from `r`, consuming exactly its bytes.
pub fn read_block<R: Read>(r: &mut R) -> Result<Matrix> {
    let (m, _) = read_block_with_dtype(r)?;
    Ok(m)
}

pub fn read_block_with_dtype<R: Read>(r: &mut R) -> Result<(Matrix, Dtype)> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_up_to(r, &mut header)?;
    if got >= 4 && header[..4] != MAGIC {
        return Err(Error::BadMagic([header[0], header[1], header[2], header[3]]));
    }
    if got < HEADER_LEN {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN as u64, actual: got as u64 });
    }
    let dtype = Dtype::from_code(header[4])?;
    if header[5..8] != [0, 0, 0] {
        return Err(Error::MalformedContainer("GFT1 reserved bytes are not zero".into()));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .ok_or_else(|| Error::MalformedContainer(format!("GFT1 shape {rows}x{cols} overflows")))?;

    let mut payload = Vec::new();
    let actual = r.take(expected).read_to_end(&mut payload)? as u64;
    if actual < expected {
        return Err(Error::TruncatedPayload { expected, actual });
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let m = Matrix::new(rows as usize, cols as usize, data)?;
    Ok((m, dtype))
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn write_matrix(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    // Validate before touching the filesystem so a failed write leaves no file.
    if !m.is_finite() {
        return Err(Error::NonFiniteValue("matrix"));
    }
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    write_block(&mut w, m, dtype)?;
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_matrix_with_dtype(path).map(|(m, _)| m)
}

pub fn read_matrix_with_dtype(path: &Path) -> Result<(Matrix, Dtype)> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = BufReader::new(file);
    let out = read_block_with_dtype(&mut r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::MalformedContainer(format!(
            "{}: trailing bytes after GFT1 payload",
            path.display()
        )));
    }
    Ok(out)
}
