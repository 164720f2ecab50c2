//! Binary matrix container: `b"ROMB"`, version `u32 = 1`, rows `u64`, cols
//! `u64`, then `rows * cols` row-major `f64`, all little-endian.
//!
//! Index lists and vectors use the same container as one-column matrices;
//! indices are stored as exactly representable floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ROMB";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 8;

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut row = Vec::with_capacity(8 * m.ncols());
    for i in 0..m.nrows() {
        row.clear();
        for j in 0..m.ncols() {
            row.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
        w.write_all(&row)?;
    }
    Ok(())
}

/// Reads one container. `name` labels errors; `available` bounds the payload
/// size when the source length is known.
pub fn read_matrix<R: Read>(mut r: R, name: &str, available: Option<u64>) -> Result<DMatrix<f64>> {
    let fmt = |msg: String| Error::Format {
        path: name.to_string(),
        msg,
    };
    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header).map_err(|_| fmt("truncated header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| fmt(format!("dimensions {rows} x {cols} overflow")))?;
    if let Some(avail) = available {
        let payload = avail.saturating_sub(HEADER_LEN);
        if payload < count {
            return Err(fmt(format!("truncated payload: {payload} of {count} bytes")));
        }
        if payload > count {
            return Err(fmt(format!("{} trailing bytes", payload - count)));
        }
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut m = DMatrix::zeros(rows, cols);
    let mut row = vec![0u8; 8 * cols];
    for i in 0..rows {
        r.read_exact(&mut row).map_err(|_| fmt(format!("truncated payload at row {i}")))?;
        for (j, b) in row.chunks_exact(8).enumerate() {
            m[(i, j)] = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(m)
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let f = File::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let len = f.metadata()?.len();
    read_matrix(BufReader::new(f), &path.display().to_string(), Some(len))
}

pub fn save_vector(path: &Path, v: &[f64]) -> Result<()> {
    save_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let m = load_matrix(path)?;
    if m.ncols() != 1 && m.nrows() * m.ncols() != 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("expected one column, found {}", m.ncols()),
        });
    }
    Ok(m.as_slice().to_vec())
}

pub fn save_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let v: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    save_vector(path, &v)
}

pub fn load_indices(path: &Path) -> Result<Vec<usize>> {
    load_vector(path)?
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
                Ok(v as usize)
            } else {
                Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!("{v} is not an index"),
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut buf = Vec::new();
        write_matrix(&mut buf, m).unwrap();
        assert_eq!(buf.len() as u64, HEADER_LEN + 8 * (m.len() as u64));
        read_matrix(buf.as_slice(), "mem", Some(buf.len() as u64)).unwrap()
    }

    fn bits(m: &DMatrix<f64>) -> Vec<u64> {
        m.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn empty_matrix() {
        let m = DMatrix::<f64>::zeros(0, 0);
        assert_eq!(round_trip(&m).shape(), (0, 0));
        let m = DMatrix::<f64>::zeros(0, 7);
        assert_eq!(round_trip(&m).shape(), (0, 7));
    }

    #[test]
    fn negative_and_subnormal_bitwise() {
        let m = DMatrix::from_row_slice(3, 2, &[-1.5, 5e-324, -0.0, f64::MIN_POSITIVE / 3.0, 1e308, -2.2e-310]);
        let r = round_trip(&m);
        assert_eq!(r.shape(), (3, 2));
        assert_eq!(bits(&r), bits(&m));
    }

    #[test]
    fn layout_is_row_major_little_endian() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"ROMB");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&buf[32..40], &2.0f64.to_le_bytes());
        assert_eq!(&buf[40..48], &3.0f64.to_le_bytes());
    }

    #[test]
    fn million_entries_checksum() {
        use rand::{Rng, SeedableRng};
        use sha2::{Digest, Sha256};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = DMatrix::from_fn(1000, 1000, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let digest = |m: &DMatrix<f64>| {
            let mut h = Sha256::new();
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
            h.finalize()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.romb");
        save_matrix(&path, &m).unwrap();
        let r = load_matrix(&path).unwrap();
        assert_eq!(digest(&r), digest(&m));
    }

    #[test]
    fn rejects_bad_containers() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let n = buf.len() as u64;
        assert!(read_matrix(&buf[..n as usize - 1], "t", Some(n - 1)).is_err());
        assert!(read_matrix(&buf[..n as usize - 1], "t", None).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_matrix(bad.as_slice(), "t", None), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_matrix(bad.as_slice(), "t", None).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_matrix(long.as_slice(), "t", Some(n + 1)).is_err());
        assert!(read_matrix(&buf[..10], "t", None).is_err());
    }

    #[test]
    fn index_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.romb");
        let idx = vec![0, 5, 1 << 40, 3];
        save_indices(&path, &idx).unwrap();
        assert_eq!(load_indices(&path).unwrap(), idx);
        save_vector(&path, &[0.5]).unwrap();
        assert!(load_indices(&path).is_err());
        save_indices(&path, &[]).unwrap();
        assert!(load_indices(&path).unwrap().is_empty());
    }
}
