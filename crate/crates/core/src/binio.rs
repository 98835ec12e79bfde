//! Little-endian primitives shared by the volume and checkpoint formats.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Format(format!("reading {what}: {e}")),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = n.checked_mul(4).ok_or_else(|| Error::Format(format!("{what}: {n} values overflow")))?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf, what)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Extents as `u32 rank, rank × u32`; rejects zero extents and element
/// counts that overflow or exceed `limit`.
pub(crate) fn read_extents<R: Read>(r: &mut R, limit: usize, what: &str) -> Result<Vec<usize>> {
    let rank = read_u32(r, what)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("{what}: unsupported rank {rank}")));
    }
    let mut ext = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for _ in 0..rank {
        let e = read_u32(r, what)? as usize;
        if e == 0 {
            return Err(Error::Format(format!("{what}: zero extent")));
        }
        total = total
            .checked_mul(e)
            .filter(|&t| t <= limit)
            .ok_or_else(|| Error::Format(format!("{what}: extents overflow the {limit}-element limit")))?;
        ext.push(e);
    }
    Ok(ext)
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_extents<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    let bad = || Error::invalid(format!("extents {shape:?} do not fit the u32 format"));
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!("cannot store empty extents {shape:?}")));
    }
    let mut buf = Vec::with_capacity(4 * (shape.len() + 1));
    buf.extend_from_slice(&u32::try_from(shape.len()).map_err(|_| bad())?.to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&u32::try_from(e).map_err(|_| bad())?.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::Format(format!("writing extents: {e}")))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: impl Iterator<Item = f32>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.size_hint().0 * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}
