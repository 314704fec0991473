//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic     8 bytes   "MOECKPT\0"
//! version   u32       1
//! meta_len  u64       length of the JSON metadata blob
//! meta      bytes     {"config": ModelConfig, "vocab": [..] | null, "step": n}
//! count     u64       number of parameter arrays
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim u32, dims u64 × ndim
//!   data f64 × prod(dims)
//! ```
//!
//! Parameters are matched by name on load, so any order is accepted.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Option<Vec<char>>,
    step: usize,
}

/// A model plus the character vocabulary it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vec<char>>,
    pub step: usize,
}

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut w: impl Write) -> Result<()> {
    let meta = Meta {
        config: ckpt.model.config().clone(),
        vocab: ckpt.vocab.clone(),
        step: ckpt.step,
    };
    let meta = serde_json::to_vec(&meta).map_err(ck)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(meta.len() as u64)?;
    w.write_all(&meta)?;
    let params = ckpt.model.params();
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("bad magic; not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(ck)?;
    let mut model = Model::zeroed(meta.config)?;
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count != model.params().len() {
        return Err(ck(format!(
            "checkpoint has {count} arrays, config expects {}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(ck)?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| ck(format!("unknown parameter '{name}'")))?;
        seen[id.index()] = true;
        model.params_mut().set(id, Tensor::new(shape, data)?)?;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ck(format!("missing parameter '{}'", model.params().names()[missing])));
    }
    Ok(Checkpoint {
        model,
        vocab: meta.vocab,
        step: meta.step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
