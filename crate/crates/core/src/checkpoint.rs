//! Binary checkpoint of named matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"LSATCKPT"
//! version    u32       1
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rows     u64
//!   cols     u64
//!   values   rows*cols f64, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"LSATCKPT";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(mut w: W, tensors: &[(String, &Matrix)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * 8);
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save(path: &Path, tensors: &[(String, &Matrix)]) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, tensors)?;
    fs::write(path, buf)?;
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

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<(String, Matrix)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let total = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let mut raw = vec![0u8; total];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, values)?));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, Matrix)>> {
    read_from(fs::File::open(path)?)
}
