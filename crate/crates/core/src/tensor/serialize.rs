//! Flat binary container for named parameter tensors.
//!
//! Layout: magic `RQTN`, version byte, u32 record count, then per record:
//! u16 name length + UTF-8 name, u8 rank, u32 dims, raw little-endian f32
//! data. Used by harness checkpoints; writes are byte-deterministic.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RQTN";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic header (not a parameter container)")]
    BadMagic,
    #[error("container version {found} unsupported (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("malformed record: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> Result<(), SerializeError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>, SerializeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SerializeError::BadMagic);
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(SerializeError::Version {
            found: ver[0],
            expected: VERSION,
        });
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let count = u32::from_le_bytes(cnt) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut nlen = [0u8; 2];
        r.read_exact(&mut nlen)?;
        let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| SerializeError::Malformed(format!("name not utf8: {e}")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}
