//! Binary matrix dump: magic `WSEDF1`, `u32` rows, `u32` columns, then
//! `rows · cols` little-endian `f32` values in row-major order.

use std::io::{Read, Write};

use crate::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 6] = b"WSEDF1";

pub fn write_matrix<W: Write>(mut out: W, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::shape(format!(
            "{rows}×{cols} matrix given {} values",
            values.len()
        )));
    }
    let dim = |n: usize| {
        u32::try_from(n).map_err(|_| Error::invalid(format!("dimension {n} does not fit in u32")))
    };
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&dim(rows)?.to_le_bytes())?;
    out.write_all(&dim(cols)?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Returns `(rows, cols, values)`.
pub fn read_matrix<R: Read>(mut input: R) -> Result<(usize, usize, Vec<f32>)> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format("not a WSEDF1 matrix file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated {rows}×{cols} matrix")))?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, cols, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, 2, 3, &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(&buf[..6], b"WSEDF1");
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &3u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 6 * 4);
        let (r, c, v) = read_matrix(buf.as_slice()).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(v, vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(read_matrix(&b"WSEDM1\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_matrix(&mut buf, 2, 2, &[0.0; 4]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_matrix(buf.as_slice()), Err(Error::Format(_))));
    }
}
