//! Self-describing binary checkpoints: magic, format version, model config,
//! then named parameter and buffer arrays as little-endian 64-bit floats.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ResNetSE};
use crate::tensor::TensorError;

const MAGIC: &[u8; 8] = b"ASDKCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] TensorError),
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_array(buf: &mut Vec<u8>, name: &str, data: &[f64]) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, Vec<f64>), CheckpointError> {
        let name_len = self.u32("array name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "array name")?)
            .map_err(|_| CheckpointError::Format("array name is not utf-8".into()))?
            .to_string();
        let len = self.u64("array length")? as usize;
        let raw = self.take(len * 8, &format!("array {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, data))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ResNetSE) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let c = &model.config;
    for v in c
        .channels
        .iter()
        .chain(&c.blocks_per_stage)
        .chain([&c.se_reduction, &c.embedding_dim, &c.n_classes, &c.input_mels])
    {
        push_u32(&mut buf, *v as u32);
    }
    let params = model.parameters();
    let buffers = model.buffers();
    push_u32(&mut buf, params.len() as u32);
    for (name, t) in &params {
        push_array(&mut buf, name, &t.to_vec());
    }
    push_u32(&mut buf, buffers.len() as u32);
    for (name, data) in &buffers {
        push_array(&mut buf, name, data);
    }
    fs::write(path.as_ref(), buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ResNetSE, CheckpointError> {
    let raw = fs::read(path.as_ref())?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::Format(
            "bad magic; not a checkpoint file".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let mut next = |what: &str| r.u32(what).map(|v| v as usize);
    let config = ModelConfig {
        channels: [
            next("channels")?,
            next("channels")?,
            next("channels")?,
            next("channels")?,
        ],
        blocks_per_stage: [
            next("blocks")?,
            next("blocks")?,
            next("blocks")?,
            next("blocks")?,
        ],
        se_reduction: next("se_reduction")?,
        embedding_dim: next("embedding_dim")?,
        n_classes: next("n_classes")?,
        input_mels: next("input_mels")?,
    };
    let model = ResNetSE::new(config, 0)?;
    let n_params = r.u32("parameter count")? as usize;
    let mut stored = std::collections::HashMap::new();
    for _ in 0..n_params {
        let (name, data) = r.array()?;
        stored.insert(name, data);
    }
    for (name, t) in model.parameters() {
        let data = stored.remove(&name).ok_or_else(|| {
            CheckpointError::Format(format!("parameter {name} missing from checkpoint"))
        })?;
        if data.len() != t.numel() {
            return Err(CheckpointError::Format(format!(
                "parameter {name} has {} values, model expects {}",
                data.len(),
                t.numel()
            )));
        }
        t.set_data(&data);
    }
    if let Some(name) = stored.keys().next() {
        return Err(CheckpointError::Format(format!(
            "checkpoint has unknown parameter {name}"
        )));
    }
    let n_buffers = r.u32("buffer count")? as usize;
    for _ in 0..n_buffers {
        let (name, data) = r.array()?;
        if !model.load_buffer(&name, &data) {
            return Err(CheckpointError::Format(format!(
                "checkpoint has unknown buffer {name}"
            )));
        }
    }
    if r.pos != raw.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after checkpoint payload",
            raw.len() - r.pos
        )));
    }
    Ok(model)
}
