//! Versioned binary checkpoint container.
//!
//! Layout: magic `HMOE`, format version (u32 LE), model-config hash
//! (u64 LE), blob count (u32 LE), then per blob: name length (u32 LE),
//! UTF-8 name, rank (u32 LE), dims (u64 LE each), and the buffer as
//! little-endian 64-bit floats. Save/load round-trips bit-exactly.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HMOE";
const FORMAT_VERSION: u32 = 1;

pub fn save(path: &Path, config_hash: u64, blobs: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&config_hash.to_le_bytes()).map_err(io)?;
    w.write_all(&(blobs.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in blobs {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<(u64, Vec<(String, Tensor)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: checkpoint format v{version}, expected v{FORMAT_VERSION}",
            path.display()
        )));
    }
    let config_hash = read_u64(&mut r, path)?;
    let count = read_u32(&mut r, path)? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::data(format!("{}: bad blob name", path.display())))?;
        let rank = read_u32(&mut r, path)? as usize;
        if rank > 3 {
            return Err(Error::data(format!("{}: blob {name} has rank {rank}", path.display())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        blobs.push((name, Tensor::new(shape, data)));
    }
    Ok((config_hash, blobs))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}
