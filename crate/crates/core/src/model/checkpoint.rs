use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{read_exact, read_extents, read_f32s, read_u32, write_extents, write_f32s, write_u32};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTSW0001";

const MAX_ELEMENTS: usize = 1 << 30;

/// Config text plus named `f32` tensors, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Layout: magic, `u32` config length and UTF-8 config text, then until
    /// end of file one record per tensor: `u32` name length, name bytes,
    /// `u32` rank, extents, data. All little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(format!("writing checkpoint: {e}"));
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        write_u32(w, u32::try_from(self.config_text.len()).map_err(|_| Error::invalid("config text too long"))?)
            .map_err(io)?;
        w.write_all(self.config_text.as_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            write_u32(w, u32::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_extents(w, t.shape())?;
            write_f32s(w, t.data().iter().copied()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let n = read_u32(r, "config length")? as usize;
        let mut text = vec![0u8; n];
        read_exact(r, &mut text, "config text")?;
        let config_text = String::from_utf8(text).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let mut tensors = Vec::new();
        loop {
            let mut len = [0u8; 4];
            match r.read(&mut len[..1]) {
                Ok(0) => break,
                Ok(_) => read_exact(r, &mut len[1..], "tensor name length")?,
                Err(e) => return Err(Error::Format(format!("reading checkpoint: {e}"))),
            }
            let nlen = u32::from_le_bytes(len) as usize;
            if nlen > 4096 {
                return Err(Error::Format(format!("tensor name length {nlen} is implausible")));
            }
            let mut name = vec![0u8; nlen];
            read_exact(r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let shape = read_extents(r, MAX_ELEMENTS, &name)?;
            let data = read_f32s(r, shape.iter().product(), &name)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { config_text, tensors })
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    ck.write_to(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::read_from(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
