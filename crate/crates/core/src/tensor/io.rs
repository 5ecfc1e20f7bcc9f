//! Flat binary tensor files: `"PVAT"`, version `u32`, rank `u32`, extents as
//! `u64`, then row-major `f64` values, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVAT";
pub const VERSION: u32 = 1;

pub fn write_tensor_to(tensor: &Tensor, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read) -> std::result::Result<Tensor, String> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| e.to_string())?;
    if &word != MAGIC {
        return Err("bad magic".into());
    }
    r.read_exact(&mut word).map_err(|e| e.to_string())?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    r.read_exact(&mut word).map_err(|e| e.to_string())?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut wide = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut wide).map_err(|e| e.to_string())?;
        shape.push(u64::from_le_bytes(wide) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut wide).map_err(|e| e.to_string())?;
        data.push(f64::from_le_bytes(wide));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes".into());
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(tensor, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut BufReader::new(file)).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
