//! `HFNN` parameter checkpoints.
//!
//! Layout (little-endian): magic `HFNN`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u32` dims,
//! `f32` payload. Part A tensors (`a.*`) come first, then Part B (`b.*`).

use std::io::{Read, Write};

use super::network::{NamedTensor, NetworkParams, PART_A_PREFIX, PART_B_PREFIX};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_u32, read_f32s, write_f32s};

pub const MAGIC: &[u8; 4] = b"HFNN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &NetworkParams<f32>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = (params.part_a.len() + params.part_b.len()) as u32;
    w.write_all(&count.to_le_bytes())?;
    for t in params.iter() {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = t.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f32s(&mut w, t.tensor.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<NetworkParams<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an HFNN checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = NetworkParams { part_a: vec![], part_b: vec![] };
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = read_f32s(&mut r, n)?;
        let tensor = Tensor::new(shape, data)?;
        let entry = NamedTensor { name, tensor };
        if entry.name.starts_with(PART_A_PREFIX) {
            if !params.part_b.is_empty() {
                return Err(Error::Format("Part A tensor after Part B".into()));
            }
            params.part_a.push(entry);
        } else if entry.name.starts_with(PART_B_PREFIX) {
            params.part_b.push(entry);
        } else {
            return Err(Error::Format(format!("tensor {} has no a./b. prefix", entry.name)));
        }
    }
    Ok(params)
}
