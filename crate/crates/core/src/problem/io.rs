//! Columnar binary dataset files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! 0   4  magic "KLVL"
//! 4   4  version (u32, currently 1)
//! 8   4  K (u32)
//! 12  4  reserved (u32, zero)
//! 16  8  dataset seed (u64)
//! 24     K × (n_k: u64, width_k: u64)
//!        then for each level, each payload column in turn: n_k × f64
//! ```

use std::io::{Read, Write};

use super::{Dataset, LevelSamples};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"KLVL";
pub const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.num_levels() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&data.seed.to_le_bytes())?;
    for level in data.levels() {
        w.write_all(&(level.len() as u64).to_le_bytes())?;
        w.write_all(&(level.width() as u64).to_le_bytes())?;
    }
    for level in data.levels() {
        for c in 0..level.width() {
            for j in 0..level.len() {
                w.write_all(&level.row(j)[c].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::invalid("not a KLVL dataset file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported KLVL version {version}")));
    }
    let k = read_u32(&mut r)? as usize;
    let _reserved = read_u32(&mut r)?;
    let seed = read_u64(&mut r)?;
    let mut shapes = Vec::with_capacity(k);
    for _ in 0..k {
        let n = read_u64(&mut r)? as usize;
        let width = read_u64(&mut r)? as usize;
        shapes.push((n, width));
    }
    let mut levels = Vec::with_capacity(k);
    for (n, width) in shapes {
        let mut data = vec![0.0; n * width];
        let mut b = [0u8; 8];
        for c in 0..width {
            for j in 0..n {
                r.read_exact(&mut b)?;
                data[j * width + c] = f64::from_le_bytes(b);
            }
        }
        levels.push(LevelSamples::new(width, data)?);
    }
    Ok(Dataset::new(seed, levels))
}
