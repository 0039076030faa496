//! Single-file checkpoints.
//!
//! Layout: the magic `XLCKPT1\n`, a little-endian `u64` header length, a
//! JSON header, the tensor payload as little-endian `f64`, and a trailing
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use xlate_tensor::Tensor;

use super::{build_variant, StepRecord, TrainState};
use crate::config::RunConfig;
use crate::optim::Moments;

pub const MAGIC: &[u8; 8] = b"XLCKPT1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint was written for config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    kind: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    structure_hash: String,
    config: String,
    step: u64,
    opt_g_steps: BTreeMap<String, u64>,
    opt_d_steps: BTreeMap<String, u64>,
    tensors: Vec<Entry>,
    history: Vec<StepRecord>,
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |kind: &str, name: &str, t: &Tensor| {
        tensors.push(Entry {
            kind: kind.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
            offset: payload.len() / 8,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    let ps = &state.model.params;
    for (n, t) in ps.params() {
        push("param", n, t);
    }
    for (n, t) in ps.buffers() {
        push("buffer", n, t);
    }
    for (tag, opt) in [("g", &state.opt_g), ("d", &state.opt_d)] {
        for (n, m) in opt.state() {
            push(&format!("opt_{tag}_m"), n, &m.m);
            push(&format!("opt_{tag}_v"), n, &m.v);
        }
    }
    let steps = |o: &crate::optim::Adam| o.state().iter().map(|(k, m)| (k.clone(), m.t)).collect();
    let cfg = state.model.config();
    let header = Header {
        structure_hash: cfg.structure_hash(),
        config: cfg.to_toml(),
        step: state.step,
        opt_g_steps: steps(&state.opt_g),
        opt_d_steps: steps(&state.opt_d),
        tensors,
        history: state.history.clone(),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + h.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

type MomentPair = (Option<Tensor>, Option<Tensor>);

/// Rebuilds a state. With `expected`, the checkpoint must have been written
/// for a structurally identical config.
pub fn decode(bytes: &[u8], expected: Option<&RunConfig>) -> Result<TrainState, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen + 32 {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[16 + hlen..bytes.len() - 32];
    let expected_len: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum::<usize>()
        * 8;
    if payload.len() < expected_len {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(if payload.len() != expected_len {
            CheckpointError::Truncated
        } else {
            CheckpointError::Checksum
        });
    }
    let config =
        RunConfig::parse(&header.config).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if config.structure_hash() != header.structure_hash {
        return Err(CheckpointError::Header(
            "stored config does not match its hash".into(),
        ));
    }
    if let Some(exp) = expected {
        if exp.structure_hash() != header.structure_hash {
            return Err(CheckpointError::ConfigMismatch {
                expected: exp.structure_hash(),
                found: header.structure_hash,
            });
        }
    }
    let mut state =
        build_variant(&config).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    let read = |e: &Entry| -> Tensor {
        let n: usize = e.shape.iter().product();
        let data = payload[e.offset * 8..(e.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&e.shape, data)
    };
    let mut seen = 0;
    let mut seen_buffers = 0;
    let mut moments: [BTreeMap<String, MomentPair>; 2] = Default::default();
    for e in &header.tensors {
        if (e.offset + e.shape.iter().product::<usize>()) * 8 > payload.len() {
            return Err(CheckpointError::Truncated);
        }
        let t = read(e);
        let ps = &mut state.model.params;
        let slot = match e.kind.as_str() {
            "param" => {
                seen += 1;
                ps.get_mut(&e.name)
            }
            "buffer" => {
                seen_buffers += 1;
                ps.buffer_mut(&e.name)
            }
            k => {
                let which = if k.starts_with("opt_g") { 0 } else { 1 };
                let entry = moments[which].entry(e.name.clone()).or_default();
                if k.ends_with("_m") {
                    entry.0 = Some(t);
                } else {
                    entry.1 = Some(t);
                }
                continue;
            }
        };
        let Some(slot) = slot else {
            return Err(CheckpointError::Incompatible(format!(
                "unknown tensor `{}`",
                e.name
            )));
        };
        if slot.shape() != t.shape() {
            return Err(CheckpointError::Incompatible(format!(
                "`{}` has shape {:?}, model expects {:?}",
                e.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if seen != state.model.params.len() || seen_buffers != state.model.params.buffers().len() {
        return Err(CheckpointError::Incompatible(
            "parameter set differs".into(),
        ));
    }
    for (which, steps) in [(0, &header.opt_g_steps), (1, &header.opt_d_steps)] {
        let mut st = BTreeMap::new();
        for (name, (m, v)) in std::mem::take(&mut moments[which]) {
            let (Some(m), Some(v), Some(&t)) = (m, v, steps.get(&name)) else {
                return Err(CheckpointError::Header(format!(
                    "incomplete optimizer state for `{name}`"
                )));
            };
            st.insert(name, Moments { m, v, t });
        }
        if which == 0 {
            state.opt_g.set_state(st);
        } else {
            state.opt_d.set_state(st);
        }
    }
    state.step = header.step;
    state.history = header.history;
    Ok(state)
}

/// Writes atomically through a sibling temp file.
pub fn save(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(state))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&RunConfig>) -> Result<TrainState, CheckpointError> {
    decode(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::fixtures;

    #[test]
    fn round_trip_and_rejections() {
        let cfg = fixtures::tiny_config(Variant::E, &["a"]);
        let mut state = build_variant(&cfg).unwrap();
        state.step = 7;
        let bytes = encode(&state);
        let back = decode(&bytes, Some(&cfg)).unwrap();
        assert_eq!(back.model.params, state.model.params);
        assert_eq!(back.step, 7);

        assert!(matches!(
            decode(&bytes[..bytes.len() - 40], None),
            Err(CheckpointError::Truncated)
        ));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(
            decode(&flipped, None),
            Err(CheckpointError::Checksum)
        ));

        let mut other = cfg.clone();
        other.modalities[0].sigma = Some(3.0);
        assert!(matches!(
            decode(&bytes, Some(&other)),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
    }
}
