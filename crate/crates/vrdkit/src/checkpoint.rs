//! Versioned binary checkpoint primitives: a magic header, u32 shape fields,
//! length-prefixed UTF-8 strings, and row-major 64-bit little-endian floats.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VrdError};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)
        .map_err(|_| VrdError::Format("file too short for magic header".into()))?;
    if buf != magic {
        return Err(VrdError::Format(format!(
            "magic mismatch: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, value: u32) -> Result<()> {
    w.write_all(&value.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| VrdError::Format("truncated checkpoint (u32)".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u8<W: Write>(w: &mut W, value: u8) -> Result<()> {
    w.write_all(&[value])?;
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)
        .map_err(|_| VrdError::Format("truncated checkpoint (u8)".into()))?;
    Ok(buf[0])
}

pub fn write_f64<W: Write>(w: &mut W, value: f64) -> Result<()> {
    w.write_all(&value.to_le_bytes())?;
    Ok(())
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| VrdError::Format("truncated checkpoint (f64)".into()))?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_string<W: Write>(w: &mut W, value: &str) -> Result<()> {
    write_u32(w, value.len() as u32)?;
    w.write_all(value.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| VrdError::Format("truncated checkpoint (string)".into()))?;
    String::from_utf8(buf).map_err(|e| VrdError::Format(format!("bad utf-8 in checkpoint: {e}")))
}

pub fn write_vector<W: Write>(w: &mut W, v: &DVector<f64>) -> Result<()> {
    write_u32(w, v.len() as u32)?;
    for x in v.iter() {
        write_f64(w, *x)?;
    }
    Ok(())
}

pub fn read_vector<R: Read>(r: &mut R) -> Result<DVector<f64>> {
    let len = read_u32(r)? as usize;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(read_f64(r)?);
    }
    Ok(DVector::from_vec(values))
}

/// Row-major matrix with its shape prefix.
pub fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    write_u32(w, m.nrows() as u32)?;
    write_u32(w, m.ncols() as u32)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write_f64(w, m[(i, j)])?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = read_f64(r)?;
        }
    }
    Ok(m)
}

/// Fails when trailing bytes remain after a complete read.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(VrdError::Format("trailing bytes after checkpoint body".into())),
    }
}
