//! Binary checkpoint container: magic, version, stage counters, RNG state,
//! named parameter and velocity blocks, and the pseudo-label store. Blocks
//! are sorted by name so identical states serialize to identical bytes.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{PseudoStore, Sgd, Stage, TrainState};
use crate::config::ModelConfig;
use crate::geometry::Box3d;

const MAGIC: &[u8; 8] = b"CMDACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.to_path_buf(), source }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match state.stage {
        Stage::Pretrain => 0,
        Stage::Selftrain => 1,
    });
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&(state.round as u64).to_le_bytes());
    out.extend_from_slice(&state.opt.momentum().to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    let word_pos = state.rng.get_word_pos();
    out.extend_from_slice(&(word_pos as u64).to_le_bytes());
    out.extend_from_slice(&((word_pos >> 64) as u64).to_le_bytes());

    let mut params: Vec<(&str, &crate::autodiff::Tensor)> = state.model.params.iter().collect();
    params.sort_by(|a, b| a.0.cmp(b.0));
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params {
        push_str(&mut out, name);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        push_f64s(&mut out, tensor.data());
    }

    let velocities: Vec<(&str, &[f64])> = state.opt.velocities().collect();
    out.extend_from_slice(&(velocities.len() as u64).to_le_bytes());
    for (name, v) in velocities {
        push_str(&mut out, name);
        out.extend_from_slice(&(v.len() as u64).to_le_bytes());
        push_f64s(&mut out, v);
    }

    out.extend_from_slice(&(state.pseudo.len() as u64).to_le_bytes());
    for (id, boxes) in &state.pseudo {
        push_str(&mut out, id);
        out.extend_from_slice(&(boxes.len() as u64).to_le_bytes());
        for b in boxes {
            push_f64s(&mut out, &[b.x, b.y, b.z, b.l, b.w, b.h, b.yaw]);
            out.extend_from_slice(&b.class_id.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CheckpointError::Format("non-UTF-8 block name".into()))
    }
}

/// Rebuild a training state from bytes. The model is constructed fresh from
/// `config` and every tensor is then overwritten, so the name set and shapes
/// in the file must match the configured architecture exactly.
pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<TrainState, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let stage = match r.u8()? {
        0 => Stage::Pretrain,
        1 => Stage::Selftrain,
        other => return Err(CheckpointError::Format(format!("unknown stage tag {other}"))),
    };
    let epoch = r.u64()? as usize;
    let round = r.u64()? as usize;
    let momentum = r.f64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u64()? as u128 | ((r.u64()? as u128) << 64);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut state = TrainState::new(config.clone(), 0);
    state.stage = stage;
    state.epoch = epoch;
    state.round = round;
    state.rng = rng;
    state.opt = Sgd::new(momentum);

    let param_count = r.u64()? as usize;
    if param_count != state.model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "file has {param_count} parameter blocks, model expects {}",
            state.model.params.len()
        )));
    }
    for _ in 0..param_count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        let slot = state
            .model
            .params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unexpected block {name:?}")))?;
        if slot.shape() != shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "block {name:?} has shape {:?}, model expects {:?}",
                shape,
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(&data);
    }

    let vel_count = r.u64()? as usize;
    for _ in 0..vel_count {
        let name = r.string()?;
        let len = r.u64()? as usize;
        state.opt.set_velocity(&name, r.f64s(len)?);
    }

    let pseudo_count = r.u64()? as usize;
    let mut pseudo = PseudoStore::new();
    for _ in 0..pseudo_count {
        let id = r.string()?;
        let box_count = r.u64()? as usize;
        let mut boxes = Vec::with_capacity(box_count);
        for _ in 0..box_count {
            let f = r.f64s(7)?;
            let class_id = r.u32()?;
            let b = Box3d::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], class_id)
                .map_err(|e| CheckpointError::Format(format!("pseudo box: {e}")))?;
            boxes.push(b);
        }
        pseudo.insert(id, boxes);
    }
    state.pseudo = pseudo;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after checkpoint body",
            bytes.len() - r.pos
        )));
    }
    Ok(state)
}

pub fn save(path: &Path, state: &TrainState) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(state)).map_err(|e| io_err(path, e))
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<TrainState, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes, config)
}
