//! Binary parameter snapshots.
//!
//! Layout (little-endian): magic `RMCK`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, UTF-8 name, `u8` frozen flag, `u32`
//! rank, `u64` dims and `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;

const MAGIC: &[u8; 4] = b"RMCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (_, p) in store.iter() {
        w.write_u32::<LittleEndian>(p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u8(p.frozen as u8)?;
        w.write_u32::<LittleEndian>(p.shape.len() as u32)?;
        for &d in &p.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in p.data.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Restore values into a store built with the same architecture. Names,
/// order and shapes must match exactly.
pub fn read_checkpoint<R: Read>(store: &mut ParamStore, mut r: R) -> Result<()> {
    let bad = |m: &str| AutodiffError::BadCheckpoint(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))? as usize;
    if count != store.len() {
        return Err(AutodiffError::CheckpointMismatch(format!(
            "{count} entries, model has {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let trunc = || bad("truncated entry");
        let len = r.read_u32::<LittleEndian>().map_err(|_| trunc())? as usize;
        if len > 1 << 16 {
            return Err(bad("name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| trunc())?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let frozen = r.read_u8().map_err(|_| trunc())? != 0;
        let rank = r.read_u32::<LittleEndian>().map_err(|_| trunc())? as usize;
        if rank > 8 {
            return Err(bad("rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| trunc())? as usize);
        }
        let p = store.get(id);
        if p.name != name || p.shape != shape {
            return Err(AutodiffError::CheckpointMismatch(format!(
                "entry {name} {shape:?} vs model {} {:?}",
                p.name, p.shape
            )));
        }
        let mut data = vec![0.0; p.numel()];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| trunc())?;
        let p = store.get_mut(id);
        *p.data_mut() = data;
        p.frozen = frozen;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(store, std::io::BufWriter::new(f))
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(store, std::io::BufReader::new(f))
}
