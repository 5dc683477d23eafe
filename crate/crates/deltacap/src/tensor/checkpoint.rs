//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "ODIF" | version u32 | tensor count u32
//!   then per tensor: name length u32 | UTF-8 name | rank u32 |
//!   dims (u64 each) | payload (little-endian f64)
//!
//! Round-trips are bit-exact: payloads are moved as raw f64 bit patterns.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ODIF";
pub const VERSION: u32 = 1;

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let count: usize = t.shape.iter().product();
        if count != t.data.len() {
            return Err(Error::Data(format!(
                "checkpoint tensor {}: shape {:?} does not match {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        let mut payload = Vec::with_capacity(t.data.len() * 8);
        for &v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "not a checkpoint: bad magic {magic:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Data(format!("checkpoint tensor name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload).map_err(io)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(tensors)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io("<checkpoint>", e))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_to_path(path: &std::path::Path, tensors: &[NamedTensor]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_checkpoint(std::io::BufWriter::new(f), tensors)
}

pub fn load_from_path(path: &std::path::Path) -> Result<Vec<NamedTensor>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
