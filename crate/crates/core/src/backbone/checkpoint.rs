//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "CAFCKPT\0"
//! version  u32      1
//! config   u64 length + UTF-8 JSON
//! count    u32
//! repeated count times:
//!   name   u32 length + UTF-8
//!   ndim   u32, then ndim x u64 extents
//!   data   product(extents) x f64, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CaformerParams;
use crate::error::{Error, Result};
use crate::numerics::{NdArray, ParamMap};

const MAGIC: &[u8; 8] = b"CAFCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, config: &serde_json::Value, params: &ParamMap) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, arr) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in arr.data() {
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

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(serde_json::Value, ParamMap)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config = serde_json::from_slice(&cfg)?;
    let count = read_u32(&mut r)?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let arr = NdArray::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.insert(name, arr);
    }
    Ok((config, params))
}

/// Writes `params` with `config` embedded.
pub fn save_checkpoint<C: Serialize>(path: impl AsRef<Path>, config: &C, params: &CaformerParams) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, &serde_json::to_value(config)?, &params.tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(C, CaformerParams)> {
    let file = std::fs::File::open(path)?;
    let (cfg, tensors) = read_checkpoint(std::io::BufReader::new(file))?;
    Ok((serde_json::from_value(cfg)?, CaformerParams { tensors }))
}
