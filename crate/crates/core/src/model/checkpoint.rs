//! Binary checkpoint: magic, format version, a `key=value` config block, then
//! a table of named tensors stored as little-endian `f64`.

use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{ModelConfig, ModelState, ParamSet};
use crate::config::{KvConfig, KvWriter};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPIRACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

fn encode(state: &ModelState, extra: &str) -> Vec<u8> {
    let mut kv = KvWriter::new();
    state.config.write_kv(&mut kv);
    kv.put("model.seed", state.seed);
    let config = kv.finish() + extra;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let count = (state.params.len() + state.buffers.len()) as u32;
    out.extend_from_slice(&count.to_le_bytes());
    for (kind, set) in [(KIND_PARAM, &state.params), (KIND_BUFFER, &state.buffers)] {
        for (name, t) in set.iter() {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Writes `state`; `extra` is appended verbatim to the config block.
pub fn save_state(path: impl AsRef<Path>, state: &ModelState, extra: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(state, extra)).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<ModelState> {
    load_checkpoint(path).map(|(s, _)| s)
}

/// Returns the state and the config block's non-model keys.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, KvConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take<const N: usize>(cur: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
    Ok(buf)
}

fn take_vec(cur: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = cur.get_ref().len() as u64 - cur.position();
    if n as u64 > remaining {
        return Err(bad("truncated file"));
    }
    let mut buf = vec![0u8; n];
    cur.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<(ModelState, KvConfig)> {
    let mut cur = Cursor::new(bytes);
    if take::<8>(&mut cur).ok().as_ref() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing magic string; not a checkpoint"));
    }
    let version = u32::from_le_bytes(take(&mut cur)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u32::from_le_bytes(take(&mut cur)?) as usize;
    let text = String::from_utf8(take_vec(&mut cur, len)?).map_err(|_| bad("config block is not UTF-8"))?;
    let mut kv = KvConfig::parse(&text)?;
    let config = ModelConfig::read(ModelConfig::default_for((0, 0)), &mut kv)?;
    let seed = kv.get_or("model.seed", 0u64)?;

    let count = u32::from_le_bytes(take(&mut cur)?) as usize;
    let mut params = ParamSet::default();
    let mut buffers = ParamSet::default();
    for _ in 0..count {
        let [kind] = take::<1>(&mut cur)?;
        let nlen = u16::from_le_bytes(take(&mut cur)?) as usize;
        let name = String::from_utf8(take_vec(&mut cur, nlen)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let [ndim] = take::<1>(&mut cur)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cur)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take_vec(&mut cur, numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| bad(e.to_string()))?;
        match kind {
            KIND_PARAM => params.push(name, t),
            KIND_BUFFER => buffers.push(name, t),
            k => return Err(bad(format!("unknown tensor kind {k}"))),
        }
    }
    if cur.position() as usize != bytes.len() {
        return Err(bad("trailing bytes after tensor table"));
    }
    let template = ModelState::init(config.clone(), seed)?;
    for (want, got) in [(&template.params, &params), (&template.buffers, &buffers)] {
        if want.names != got.names {
            return Err(bad("tensor names do not match the model config"));
        }
        for ((name, a), b) in want.iter().zip(&got.tensors) {
            if a.shape() != b.shape() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
    }
    if !params.is_finite() || !buffers.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    let state = ModelState {
        config,
        params,
        buffers,
        seed,
        version: 0,
    };
    let rest: String = kv
        .render()
        .lines()
        .filter(|l| !l.starts_with("model."))
        .map(|l| format!("{l}\n"))
        .collect();
    Ok((state, KvConfig::parse(&rest)?))
}
