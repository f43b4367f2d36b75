//! Binary checkpoint format for named tensors.
//!
//! ```text
//! "LSNP" | version:u8 | count:u32
//! count × ( name_len:u16 | name | rank:u8 | dims:u64×rank | offset:u64 )
//! payload: little-endian f64 values, tensors in name order
//! ```
//! Offsets are byte offsets from the start of the payload. All integers are
//! little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LSNP";
const VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += 8 * t.len() as u64;
    }
    for t in tensors.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(path, format!("truncated checkpoint: {e}")))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint; `path` is only used in error messages.
pub fn read_checkpoint<R: Read>(mut r: R, path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, path)?;
    if version[0] != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", version[0]),
        ));
    }
    let mut count = [0u8; 4];
    read_exact(&mut r, &mut count, path)?;
    let count = u32::from_le_bytes(count) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len, path)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, path)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let offset = read_u64(&mut r, path)?;
        if offset != expected_offset {
            return Err(Error::format(path, format!("unexpected offset for `{name}`")));
        }
        expected_offset += 8 * shape.iter().product::<usize>() as u64;
        entries.push((name, shape));
    }
    let mut out = BTreeMap::new();
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 8 * n];
        read_exact(&mut r, &mut bytes, path)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}
