//! Self-describing binary checkpoint container: a version byte, a JSON
//! metadata blob (architecture hyperparameters, task, provenance), then
//! named parameter blobs with shapes and group tags. Little-endian.

use crate::autodiff::{Group, Params, Tensor};
use crate::codec::CodecArch;
use crate::error::{Error, Result};
use crate::task::{AuxPosition, RecognizerArch, TaskKind};
use crate::training::LossConfig;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointMeta {
    /// "codec" or "recognizer".
    pub kind: String,
    pub task: Option<TaskKind>,
    pub codec_arch: Option<CodecArch>,
    pub recognizer_arch: Option<RecognizerArch>,
    pub aux_position: Option<AuxPosition>,
    pub loss: Option<LossConfig>,
    pub train_seed: Option<u64>,
    /// FNV-1a digest of the originating run configuration, hex.
    pub config_digest: Option<String>,
}

pub fn save_checkpoint(path: &Path, params: &Params, meta: &CheckpointMeta) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&[CHECKPOINT_VERSION])?;
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    out.write_all(&meta_json)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, entry) in params.iter() {
        let name = entry.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!(
                "parameter name too long: {}",
                entry.name
            )));
        }
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[entry.group.as_u8()])?;
        let shape = entry.value.shape();
        out.write_all(&[shape.len() as u8])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in entry.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Checkpoint(format!("checkpoint not found: {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let mut input = BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut version = [0u8; 1];
    input.read_exact(&mut version).map_err(|_| bad("empty file"))?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", version[0])));
    }
    let mut u32buf = [0u8; 4];
    input
        .read_exact(&mut u32buf)
        .map_err(|_| bad("truncated metadata length"))?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_json = vec![0u8; meta_len];
    input
        .read_exact(&mut meta_json)
        .map_err(|_| bad("truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_json).map_err(|e| bad(&format!("bad metadata: {e}")))?;

    input
        .read_exact(&mut u32buf)
        .map_err(|_| bad("truncated parameter count"))?;
    let n = u32::from_le_bytes(u32buf) as usize;
    let mut params = Params::new();
    for _ in 0..n {
        let mut u16buf = [0u8; 2];
        input
            .read_exact(&mut u16buf)
            .map_err(|_| bad("truncated name length"))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
        let mut byte = [0u8; 1];
        input.read_exact(&mut byte).map_err(|_| bad("truncated group"))?;
        let group =
            Group::from_u8(byte[0]).ok_or_else(|| bad(&format!("unknown group {}", byte[0])))?;
        input.read_exact(&mut byte).map_err(|_| bad("truncated rank"))?;
        let ndim = byte[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input
                .read_exact(&mut u32buf)
                .map_err(|_| bad("truncated shape"))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            input
                .read_exact(&mut u32buf)
                .map_err(|_| bad("truncated tensor data"))?;
            data.push(f32::from_le_bytes(u32buf));
        }
        params.add(name, group, Tensor::new(shape, data)?);
    }
    Ok((params, meta))
}
