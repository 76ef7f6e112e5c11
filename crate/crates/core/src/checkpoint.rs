//! Binary checkpoint I/O for named parameter tensors.
//!
//! Layout: magic `LOVS`, format version, tensor count, then per tensor a
//! length-prefixed name, the shape, and raw little-endian f64 data. Loading
//! validates the whole file against the target parameter set before touching
//! any values, so a mismatched or truncated file never leaves the model in a
//! half-updated state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

const MAGIC: &[u8; 4] = b"LOVS";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name();
        let (shape, data) = p.shape_and_data();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in &shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One tensor as read back from disk.
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<StoredTensor>> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic).map_err(|_| bad("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated version field"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated tensor count"))? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let err = |msg: &str| Error::Format(format!("{}: tensor {i}: {msg}", path.display()));
        let name_len = read_u32(&mut r).map_err(|_| err("truncated name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes).map_err(|_| err("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| err("name is not UTF-8"))?;
        let rank = read_u32(&mut r).map_err(|_| err("truncated rank"))? as usize;
        if rank > 8 {
            return Err(err(&format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(|_| err("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        for x in data.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b).map_err(|_| err("truncated tensor data"))?;
            *x = f64::from_le_bytes(b);
        }
        tensors.push(StoredTensor { name, shape, data });
    }
    Ok(tensors)
}

/// Load a checkpoint into an existing parameter set. Every stored tensor
/// must match a registered parameter by name and shape and vice versa;
/// nothing is modified unless the whole file validates.
pub fn load_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let stored = read_checkpoint(path)?;
    if stored.len() != params.len() {
        return Err(Error::Format(format!(
            "{}: checkpoint holds {} tensors but the model has {} parameters",
            path.display(),
            stored.len(),
            params.len()
        )));
    }
    for t in &stored {
        let p = params.get(&t.name).ok_or_else(|| {
            Error::Format(format!(
                "{}: checkpoint tensor {:?} does not exist in the model",
                path.display(),
                t.name
            ))
        })?;
        let shape = p.shape();
        if shape != t.shape {
            return Err(Error::Format(format!(
                "{}: tensor {:?} has shape {:?} on disk but {:?} in the model",
                path.display(),
                t.name,
                t.shape,
                shape
            )));
        }
    }
    for t in &stored {
        let p = params.get(&t.name).expect("validated above");
        p.set_data(&t.data);
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<()> {
    r.read_exact(buf)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
