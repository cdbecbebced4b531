//! On-disk formats: `HPX1` tensors and 8-bit binary PGM images.
//!
//! `HPX1` layout: the ASCII magic `HPX1`, a little-endian `u32` rank, one
//! little-endian `u32` per dimension, then the row-major payload as
//! little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HPX1_MAGIC: &[u8; 4] = b"HPX1";

pub fn encode_hpx1(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(HPX1_MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in tensor.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_hpx1(bytes: &[u8]) -> Result<Tensor> {
    let mut reader = bytes;
    read_hpx1_from(&mut reader)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_hpx1_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("missing magic".into()))?;
    if &magic != HPX1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_hpx1(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_hpx1(tensor))?;
    w.flush()?;
    Ok(())
}

pub fn load_hpx1(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_hpx1_from(&mut r)
}

/// Min-max normalizes a 2D grid to `[0, 255]` and encodes it as binary PGM (P5).
pub fn encode_pgm(grid: &Tensor) -> Result<Vec<u8>> {
    if grid.rank() != 2 {
        return Err(Error::Shape(format!(
            "PGM export needs a 2D grid, got {:?}",
            grid.shape()
        )));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let lo = grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.data().iter().map(|&x| {
        if span > 0.0 {
            ((x - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn save_pgm(path: impl AsRef<Path>, grid: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(grid)?)?;
    Ok(())
}
