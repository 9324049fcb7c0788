//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RSPCKPT\0"
//! version      u32       currently 1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON:
//!              {"model": ModelConfig, "schedule": ScheduleConfig,
//!               "optimizer": AdamWConfig, "step": u64}
//! n_tensors    u32       3 * parameter count
//! tensors      n_tensors records: parameters, then first moments, then
//!              second moments, each in parameter order:
//!                rank u32, dims rank x u32, data product(dims) x f32
//! extra_len    u64
//! extra        extra_len opaque bytes (caller-defined resume state)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, ModelConfig, ModelError, Params, Result, ScheduleConfig, TrainState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: ScheduleConfig,
    optimizer: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub extra: Vec<u8>,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_checkpoint<W: Write>(w: &mut W, state: &TrainState, extra: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        model: state.config.clone(),
        schedule: state.schedule.clone(),
        optimizer: state.optimizer.config.clone(),
        step: state.step(),
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let params = state.params.tensors();
    let (m, v) = state.optimizer.moments();
    w.write_all(&((params.len() * 3) as u32).to_le_bytes())?;
    for t in params.into_iter().chain(m).chain(v) {
        write_tensor(w, t)?;
    }
    w.write_all(&(extra.len() as u64).to_le_bytes())?;
    w.write_all(extra)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(ModelError::Checkpoint(format!("implausible tensor rank {}", rank)));
    }
    let dims = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len: usize = dims.iter().product();
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", version)));
    }
    let header_len = read_u32(r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.model.validate()?;

    let n = read_u32(r)? as usize;
    if !n.is_multiple_of(3) {
        return Err(ModelError::Checkpoint(format!("tensor count {} is not a multiple of 3", n)));
    }
    let mut tensors = (0..n).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
    let second = tensors.split_off(2 * n / 3);
    let first = tensors.split_off(n / 3);
    let params = Params::from_tensors(&header.model, tensors)?;
    for (p, (m, v)) in params.tensors().iter().zip(first.iter().zip(&second)) {
        if p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(ModelError::Checkpoint("optimizer moment shape mismatch".into()));
        }
    }

    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut extra = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut extra)?;

    Ok(Checkpoint {
        state: TrainState {
            config: header.model,
            schedule: header.schedule,
            params,
            optimizer: AdamW::from_parts(header.optimizer, header.step, first, second),
        },
        extra,
    })
}
