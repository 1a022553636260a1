//! Flat little-endian parameter files.
//!
//! Layout: `b"FLMP"`, version `u32`, then `hidden_dim head_dim num_blocks
//! layers_per_block ffn_dim num_tasks max_history_len max_candidates` as
//! `u32`, the seed as `u64`, then every tensor as `f64` in the order of
//! [`ModelParams`]'s declaration walk.

use std::io::{Read, Write};

use super::{ModelConfig, ModelError, ModelParams};

pub const PARAMS_MAGIC: [u8; 4] = *b"FLMP";
pub const PARAMS_VERSION: u32 = 1;

pub fn write_params(params: &ModelParams, mut w: impl Write) -> Result<(), ModelError> {
    let c = params.config();
    w.write_all(&PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    for dim in [
        c.hidden_dim,
        c.head_dim,
        c.num_blocks,
        c.layers_per_block,
        c.ffn_dim,
        c.num_tasks,
        c.max_history_len,
        c.max_candidates,
    ] {
        let dim = u32::try_from(dim).map_err(|_| ModelError::Format(format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    let mut result = Ok(());
    params.for_each_tensor(|_, values| {
        if result.is_err() {
            return;
        }
        for v in values {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                result = Err(e);
                return;
            }
        }
    });
    result?;
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<ModelParams, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != PARAMS_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != PARAMS_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let config = ModelConfig {
        hidden_dim: dims[0],
        head_dim: dims[1],
        num_blocks: dims[2],
        layers_per_block: dims[3],
        ffn_dim: dims[4],
        num_tasks: dims[5],
        max_history_len: dims[6],
        max_candidates: dims[7],
        seed: u64::from_le_bytes(seed),
    };
    let mut params = ModelParams::zeros(config)?;
    let mut result = Ok(());
    params.for_each_tensor_mut(|_, values| {
        if result.is_err() {
            return;
        }
        let mut buf = [0u8; 8];
        for v in values {
            if let Err(e) = r.read_exact(&mut buf) {
                result = Err(e);
                return;
            }
            *v = f64::from_le_bytes(buf);
        }
    });
    result.map_err(|e| ModelError::Format(format!("truncated weights: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::Format("trailing bytes after weights".into()));
    }
    params.validate()?;
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
