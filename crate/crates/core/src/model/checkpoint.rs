//! Binary model checkpoints.
//!
//! Layout, little-endian: magic `FGCK`; `u16` version; `u32` byte length of
//! the JSON config echo followed by the JSON itself; every parameter in
//! canonical order as `f64`; finally the normalization running mean and
//! running variance as `f64`.

use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"FGCK";
pub const CKPT_VERSION: u16 = 1;

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&state.config).map_err(|e| Error::Contract(format!("config echo: {e}")))?;
    let floats = state.num_params() + state.norm.running_mean.len() + state.norm.running_var.len();
    let mut out = Vec::with_capacity(10 + config.len() + 8 * floats);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let stats = state.norm.running_mean.iter().chain(&state.norm.running_var);
    for v in state.params().into_iter().flat_map(|t| t.data().iter()).chain(stats) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let bad = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 10 || bytes[..4] != CKPT_MAGIC {
        return Err(bad(0, "not a model checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(bad(4, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = 10 + len;
    if bytes.len() < body {
        return Err(bad(10, "truncated config echo".into()));
    }
    let config: ModelConfig =
        serde_json::from_slice(&bytes[10..body]).map_err(|e| bad(10, format!("config echo: {e}")))?;
    config.validate().map_err(|e| bad(10, e.to_string()))?;
    let mut state = ModelState::init(config, 0).map_err(|e| bad(10, e.to_string()))?;

    let expected = state.num_params() + 2 * state.norm.channels();
    let rest = &bytes[body..];
    if rest.len() != 8 * expected {
        return Err(bad(
            body,
            format!("expected {} parameter bytes, found {}", 8 * expected, rest.len()),
        ));
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in state.params_mut() {
        for (dst, v) in t.data_mut().iter_mut().zip(values.by_ref()) {
            *dst = v;
        }
    }
    for dst in state
        .norm
        .running_mean
        .iter_mut()
        .chain(state.norm.running_var.iter_mut())
    {
        *dst = values.next().expect("length checked");
    }
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
