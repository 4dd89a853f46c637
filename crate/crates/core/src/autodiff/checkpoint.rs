//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DZSLCKPT"
//! version    u32      currently 1
//! count      u32      number of tensor records
//! record*    name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!            values f64 × prod(dims)
//! ```

use std::io::{Read, Write};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DZSLCKPT";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes()));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Flatten parameter sets into named records `prefix/param`.
pub fn named_tensors(sets: &[(&str, &ParamSet)]) -> Vec<(String, Tensor)> {
    sets.iter()
        .flat_map(|(prefix, set)| set.iter().map(move |p| (format!("{prefix}/{}", p.name), p.value.clone())))
        .collect()
}

/// Collect the records under `prefix/` back into a parameter set, in file order.
pub fn param_set(tensors: &[(String, Tensor)], prefix: &str) -> Result<ParamSet> {
    let lead = format!("{prefix}/");
    let mut set = ParamSet::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(&lead) {
            set.push(rest, t.clone());
        }
    }
    if set.is_empty() {
        return Err(Error::Checkpoint(format!("no tensors under `{prefix}`")));
    }
    Ok(set)
}
