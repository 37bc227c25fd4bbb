//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! magic[8] | n_config | config[n_config] | n_tensors |
//!   { rank | dims[rank] | f32 data[product(dims)] }*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UNET_MAGIC: &[u8; 8] = b"PAPUNET1";
pub const CNN_MAGIC: &[u8; 8] = b"PAPCNN01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 8],
    pub config: Vec<u32>,
    pub tensors: Vec<Tensor<f32>>,
}

fn put_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn get_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&self.magic)?;
        put_u32(out, self.config.len() as u32)?;
        for &c in &self.config {
            put_u32(out, c)?;
        }
        put_u32(out, self.tensors.len() as u32)?;
        for t in &self.tensors {
            put_u32(out, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u32(out, d as u32)?;
            }
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        let n_config = get_u32(input)? as usize;
        if n_config > 64 {
            return Err(Error::Checkpoint(format!("implausible config length {n_config}")));
        }
        let config = (0..n_config).map(|_| get_u32(input)).collect::<Result<Vec<_>>>()?;
        let n_tensors = get_u32(input)? as usize;
        if n_tensors > 4096 {
            return Err(Error::Checkpoint(format!("implausible tensor count {n_tensors}")));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for i in 0..n_tensors {
            let rank = get_u32(input)? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Checkpoint(format!("tensor {i} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| get_u32(input).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len == 0 || len > (1 << 28) {
                return Err(Error::Checkpoint(format!("tensor {i} has shape {shape:?}")));
            }
            let mut bytes = vec![0u8; len * 4];
            input
                .read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("tensor {i} is truncated")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(&shape, data)?);
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { magic, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }

    pub fn expect_magic(&self, magic: &[u8; 8]) -> Result<()> {
        if &self.magic != magic {
            return Err(Error::Checkpoint(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&self.magic)
            )));
        }
        Ok(())
    }
}
