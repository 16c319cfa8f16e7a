//! Bag file format: magic `SGCD`, u32-LE row and column counts, then
//! row-major 32-bit little-endian IEEE-754 floats. Storage is 32-bit; the
//! engine upcasts to 64-bit on load, so write→read→write is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const BAG_MAGIC: [u8; 4] = *b"SGCD";

/// Largest accepted `rows * cols` product; anything bigger is treated as a
/// corrupt header.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_bag(path: impl AsRef<Path>, instances: &Matrix<f64>) -> Result<()> {
    let rows = u32::try_from(instances.rows())
        .map_err(|_| Error::ShapeOverflow(format!("{} rows", instances.rows())))?;
    let cols = u32::try_from(instances.cols())
        .map_err(|_| Error::ShapeOverflow(format!("{} cols", instances.cols())))?;
    let mut buf = Vec::with_capacity(12 + instances.len() * 4);
    buf.extend_from_slice(&BAG_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in instances.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<Matrix<f64>> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile(format!(
            "{}: {} bytes is shorter than the 12-byte header",
            path.as_ref().display(),
            bytes.len()
        )));
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != BAG_MAGIC {
        return Err(Error::BadMagic { expected: BAG_MAGIC, found });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let elements = rows * cols;
    if elements > MAX_ELEMENTS {
        return Err(Error::ShapeOverflow(format!("{rows}x{cols} elements")));
    }
    let needed = 12 + elements as usize * 4;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile(format!(
            "{}: header claims {rows}x{cols} ({needed} bytes), file has {}",
            path.as_ref().display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(elements as usize);
    for chunk in bytes[12..needed].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(Matrix::from_vec(rows as usize, cols as usize, data))
}
