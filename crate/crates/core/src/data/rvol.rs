//! `RVOL0001` volumes: magic, `u32` rank, `rank × u32` extents, `f32` data,
//! all little-endian and row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{read_exact, read_extents, read_f32s, write_extents, write_f32s};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RVOL_MAGIC: &[u8; 8] = b"RVOL0001";

/// Largest element count accepted on load.
pub const RVOL_MAX_ELEMENTS: usize = 1 << 28;

pub fn write_rvol<W: Write>(w: &mut W, v: &Tensor<f32>) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("writing volume: {e}"));
    w.write_all(RVOL_MAGIC).map_err(io)?;
    write_extents(w, v.shape())?;
    write_f32s(w, v.data().iter().copied()).map_err(io)
}

pub fn read_rvol<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "volume magic")?;
    if &magic != RVOL_MAGIC {
        return Err(Error::Format(format!("bad volume magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let shape = read_extents(r, RVOL_MAX_ELEMENTS, "volume extents")?;
    let data = read_f32s(r, shape.iter().product(), "volume data")?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(format!("reading volume: {e}")))? != 0 {
        return Err(Error::Format("trailing bytes after volume data".into()));
    }
    Tensor::new(shape, data)
}

pub fn save_rvol(path: &Path, v: &Tensor<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_rvol(&mut w, v)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_rvol(path: &Path) -> Result<Tensor<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_rvol(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
