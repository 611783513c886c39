//! Lossless binary tensor container for uncertainty maps.
//!
//! Layout: magic `DSTN` | u8 dtype tag (0 = f32, 1 = f64) | u32 ndim |
//! ndim × u64 dims | row-major payload, little-endian.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSTN";

pub fn write_tensor_f64(path: &Path, tensor: &Array2<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[1u8]).map_err(io_err)?;
    w.write_all(&(2u32).to_le_bytes()).map_err(io_err)?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for &v in tensor.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Dataset(format!("{} is not a tensor container", path.display())));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    let mut ndim_buf = [0u8; 4];
    r.read_exact(&mut ndim_buf).map_err(io_err)?;
    let ndim = u32::from_le_bytes(ndim_buf) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io_err)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    match tag[0] {
        0 => {
            for _ in 0..len {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(io_err)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        1 => {
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io_err)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        other => return Err(Error::Dataset(format!("unknown dtype tag {other}"))),
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::Dataset(format!("bad tensor shape: {e}")))
}

pub fn read_tensor_2d(path: &Path) -> Result<Array2<f64>> {
    read_tensor(path)?
        .into_dimensionality()
        .map_err(|e| Error::Dataset(format!("expected 2-d tensor: {e}")))
}
