//! Packed binary tensor formats.
//!
//! `FTK1` is the published mesh/landmark sequence layout: magic `FTK1`,
//! `u32 T`, `u32 n`, `u32 m`, then `m` face index triples as `u32`, then
//! `T*n*3` coordinates as `f32`, all little-endian. Landmark trajectories use
//! the same layout with `m = 0`.
//!
//! `FTF1` is a plain 2-D matrix used for cached audio features: magic `FTF1`,
//! `u32 rows`, `u32 cols`, `f64 native_rate`, then `rows*cols` values as
//! `f32` little-endian, row-major.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{CoreError, Result};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"FTK1";
pub const MATRIX_MAGIC: &[u8; 4] = b"FTF1";
/// Internal f64 twin of FTF1, used by caches where value fidelity matters.
pub const MATRIX_F64_MAGIC: &[u8; 4] = b"FTD1";

/// A mesh (or landmark) trajectory: fixed connectivity, per-frame positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub faces: Vec<[usize; 3]>,
    /// One n-by-3 position array per frame.
    pub frames: Vec<Array2<f64>>,
}

impl PackedSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_points(&self) -> usize {
        self.frames.first().map(|f| f.nrows()).unwrap_or(0)
    }
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &PackedSequence) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
        }
    }
    let t = seq.frames.len();
    let n = seq.n_points();
    for (i, f) in seq.frames.iter().enumerate() {
        if f.nrows() != n || f.ncols() != 3 {
            return Err(CoreError::Validation(format!(
                "frame {i} has shape {}x{}, expected {n}x3",
                f.nrows(),
                f.ncols()
            )));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(SEQUENCE_MAGIC).map_err(io_err)?;
    w.write_all(&(t as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(n as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(seq.faces.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for f in &seq.faces {
        for &v in f {
            w.write_all(&(v as u32).to_le_bytes()).map_err(io_err)?;
        }
    }
    for frame in &seq.frames {
        for i in 0..n {
            for k in 0..3 {
                w.write_all(&(frame[(i, k)] as f32).to_le_bytes())
                    .map_err(io_err)?;
            }
        }
    }
    Ok(())
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<PackedSequence> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
    if &magic != SEQUENCE_MAGIC {
        return Err(CoreError::parse(
            path,
            format!("bad magic {:?}, expected FTK1", String::from_utf8_lossy(&magic)),
        ));
    }
    let t = read_u32(&mut r, path)? as usize;
    let n = read_u32(&mut r, path)? as usize;
    let m = read_u32(&mut r, path)? as usize;
    let mut faces = Vec::with_capacity(m);
    for _ in 0..m {
        let a = read_u32(&mut r, path)? as usize;
        let b = read_u32(&mut r, path)? as usize;
        let c = read_u32(&mut r, path)? as usize;
        faces.push([a, b, c]);
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let mut frame = Array2::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                frame[(i, k)] = read_f32(&mut r, path)? as f64;
            }
        }
        frames.push(frame);
    }
    Ok(PackedSequence { faces, frames })
}

pub fn write_matrix(path: impl AsRef<Path>, mat: &Array2<f64>, native_rate: f64) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(MATRIX_MAGIC).map_err(io_err)?;
    w.write_all(&(mat.nrows() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(mat.ncols() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&native_rate.to_le_bytes()).map_err(io_err)?;
    for v in mat.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(Array2<f64>, f64)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
    if &magic != MATRIX_MAGIC {
        return Err(CoreError::parse(
            path,
            format!("bad magic {:?}, expected FTF1", String::from_utf8_lossy(&magic)),
        ));
    }
    let rows = read_u32(&mut r, path)? as usize;
    let cols = read_u32(&mut r, path)? as usize;
    let mut rate_buf = [0u8; 8];
    r.read_exact(&mut rate_buf).map_err(|e| CoreError::io(path, e))?;
    let native_rate = f64::from_le_bytes(rate_buf);
    let mut mat = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            mat[(i, j)] = read_f32(&mut r, path)? as f64;
        }
    }
    Ok((mat, native_rate))
}

pub fn write_matrix_f64(path: impl AsRef<Path>, mat: &Array2<f64>, native_rate: f64) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(MATRIX_F64_MAGIC).map_err(io_err)?;
    w.write_all(&(mat.nrows() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(mat.ncols() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&native_rate.to_le_bytes()).map_err(io_err)?;
    for v in mat.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_matrix_f64(path: impl AsRef<Path>) -> Result<(Array2<f64>, f64)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
    if &magic != MATRIX_F64_MAGIC {
        return Err(CoreError::parse(
            path,
            format!("bad magic {:?}, expected FTD1", String::from_utf8_lossy(&magic)),
        ));
    }
    let rows = read_u32(&mut r, path)? as usize;
    let cols = read_u32(&mut r, path)? as usize;
    let mut rate_buf = [0u8; 8];
    r.read_exact(&mut rate_buf).map_err(|e| CoreError::io(path, e))?;
    let native_rate = f64::from_le_bytes(rate_buf);
    let mut mat = Array2::zeros((rows, cols));
    let mut buf = [0u8; 8];
    for i in 0..rows {
        for j in 0..cols {
            r.read_exact(&mut buf).map_err(|e| CoreError::io(path, e))?;
            mat[(i, j)] = f64::from_le_bytes(buf);
        }
    }
    Ok((mat, native_rate))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| CoreError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R, path: &Path) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| CoreError::io(path, e))?;
    Ok(f32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sequence_round_trip_is_bitwise_at_f32() {
        let mut rng = crate::rng::stream(1, "packed");
        let frames: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0f32..1.0) as f64))
            .collect();
        let seq = PackedSequence {
            faces: vec![[0, 1, 2], [2, 3, 4]],
            frames,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.ftk");
        write_sequence(&path, &seq).unwrap();
        let loaded = read_sequence(&path).unwrap();
        assert_eq!(loaded, seq); // inputs were f32-representable
    }

    #[test]
    fn magic_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ftk");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        match read_sequence(&path) {
            Err(CoreError::Parse { msg, .. }) => assert!(msg.contains("magic")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn matrix_round_trip_keeps_rate_and_values() {
        let mut rng = crate::rng::stream(2, "packed");
        let mat = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-2.0f32..2.0) as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ftf");
        write_matrix(&path, &mat, 100.0).unwrap();
        let (loaded, rate) = read_matrix(&path).unwrap();
        assert_eq!(rate, 100.0);
        assert_eq!(loaded, mat);
    }
}
