//! Checkpoint file: magic, version, a JSON header (config, seed, step,
//! tensor table) and the flat parameter buffer as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{MixerConfig, MixerError, MixerParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BLMIXER\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MixerParams,
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MixerConfig,
    seed: u64,
    step: u64,
    tensors: Vec<(String, usize, usize)>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, w: &mut W) -> Result<(), MixerError> {
    let header = Header {
        config: ckpt.params.config.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        tensors: ckpt
            .params
            .layout
            .leaves()
            .iter()
            .map(|(n, s)| (n.clone(), s.rows, s.cols))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| MixerError::Format(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    w.write_u64::<LittleEndian>(ckpt.params.data.len() as u64)?;
    for x in &ckpt.params.data {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, MixerError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(MixerError::Format("not a mixer checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(MixerError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.read_u64::<LittleEndian>()?;
    if len > 1 << 24 {
        return Err(MixerError::Format("oversized header".into()));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| MixerError::Format(e.to_string()))?;
    header.config.validate()?;
    let mut params = MixerParams::zeros(&header.config);
    let table: Vec<(String, usize, usize)> = params
        .layout
        .leaves()
        .iter()
        .map(|(n, s)| (n.clone(), s.rows, s.cols))
        .collect();
    if table != header.tensors {
        return Err(MixerError::Format(
            "tensor table does not match config".into(),
        ));
    }
    let count = r.read_u64::<LittleEndian>()?;
    if count as usize != params.data.len() {
        return Err(MixerError::Format(format!(
            "expected {} parameters, file has {count}",
            params.data.len()
        )));
    }
    r.read_f64_into::<LittleEndian>(&mut params.data)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(MixerError::Format("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        params,
        seed: header.seed,
        step: header.step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), MixerError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, MixerError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
