//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TNDP"
//! version u32 (= 1)
//! count   u32 number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, dims u64 * rank
//!   payload f64 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TNDP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParameterSet) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for t in params.tensors() {
        let name = t.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
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

pub fn read_params<R: Read>(mut r: R) -> Result<ParameterSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut set = ParameterSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        set.push(Tensor::new(name, dims, data)?);
    }
    Ok(set)
}

pub fn save_params(path: &Path, params: &ParameterSet) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParameterSet> {
    let file = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(file))
}
