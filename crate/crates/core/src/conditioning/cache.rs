//! `.cond` cache files: a text header followed by raw little-endian `f32`
//! channel data.
//!
//! ```text
//! XLATE-COND 1
//! resolution 64
//! channels 12
//! modality keypoints 7 present sigma=2.0 min_confidence=0.1
//! modality depth 1 absent near=0.0 far=255.0
//! data f32le 196608
//! <196608 bytes of planar [channels, R, R] data>
//! ```

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{ConditioningStack, EncoderParams, Manifest, ModalityKind, ModalitySpec};

pub const MAGIC: &str = "XLATE-COND";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a conditioning cache (bad magic)")]
    BadMagic,
    #[error("cache format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cache truncated: expected {expected} data bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cache header inconsistent with data: {0}")]
    Inconsistent(String),
    #[error("malformed cache header: {0}")]
    Malformed(String),
}

impl CacheError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CacheError::Io(_) => 1,
            CacheError::BadMagic => 2,
            CacheError::VersionMismatch { .. } => 3,
            CacheError::Truncated { .. } => 4,
            CacheError::Inconsistent(_) => 5,
            CacheError::Malformed(_) => 6,
        }
    }
}

pub fn encode(stack: &ConditioningStack) -> Vec<u8> {
    let mut header = format!(
        "{MAGIC} {FORMAT_VERSION}\nresolution {}\nchannels {}\n",
        stack.resolution(),
        stack.channels()
    );
    for (spec, valid) in stack.manifest().entries().iter().zip(stack.validity()) {
        header.push_str(&format!(
            "modality {} {} {} {}\n",
            spec.kind,
            spec.channels,
            if *valid { "present" } else { "absent" },
            spec.params_string()
        ));
    }
    header.push_str(&format!("data f32le {}\n", stack.data().len() * 4));
    let mut out = header.into_bytes();
    out.reserve(stack.data().len() * 4);
    for v in stack.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_params(kind: ModalityKind, fields: &[&str]) -> Result<EncoderParams, CacheError> {
    let get = |key: &str| -> Result<f64, CacheError> {
        fields
            .iter()
            .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| CacheError::Malformed(format!("`{kind}` missing `{key}`")))?
            .parse()
            .map_err(|_| CacheError::Malformed(format!("`{kind}` has bad `{key}`")))
    };
    Ok(if kind.is_keypoints() {
        EncoderParams::Heatmap {
            sigma: get("sigma")?,
            min_confidence: get("min_confidence")?,
        }
    } else if kind.is_segmentation() {
        EncoderParams::OneHot
    } else if kind == ModalityKind::Depth {
        EncoderParams::DepthRange {
            near: get("near")?,
            far: get("far")?,
        }
    } else {
        EncoderParams::Binary {
            threshold: get("threshold")?,
        }
    })
}

pub fn decode(bytes: &[u8]) -> Result<ConditioningStack, CacheError> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str, CacheError> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CacheError::Truncated {
                expected: 1,
                found: 0,
            })?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| CacheError::Malformed("non-utf8 header".into()))
    };

    let first = next_line().map_err(|_| CacheError::BadMagic)?;
    let mut it = first.split(' ');
    if it.next() != Some(MAGIC) {
        return Err(CacheError::BadMagic);
    }
    let version: u32 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CacheError::Malformed("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(CacheError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let number = |line: &str, key: &str| -> Result<usize, CacheError> {
        line.strip_prefix(key)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| CacheError::Malformed(format!("expected `{key} <n>`, got `{line}`")))
    };
    let resolution = number(next_line()?, "resolution")?;
    let channels = number(next_line()?, "channels")?;
    let mut entries = Vec::new();
    let mut validity = Vec::new();
    let data_bytes = loop {
        let line = next_line()?;
        if let Some(rest) = line.strip_prefix("data f32le ") {
            break rest
                .trim()
                .parse::<usize>()
                .map_err(|_| CacheError::Malformed("bad data length".into()))?;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < 4 || fields[0] != "modality" {
            return Err(CacheError::Malformed(format!("unexpected line `{line}`")));
        }
        let kind: ModalityKind = fields[1]
            .parse()
            .map_err(|_| CacheError::Malformed(format!("unknown modality `{}`", fields[1])))?;
        let count: usize = fields[2]
            .parse()
            .map_err(|_| CacheError::Malformed("bad channel count".into()))?;
        validity.push(match fields[3] {
            "present" => true,
            "absent" => false,
            other => return Err(CacheError::Malformed(format!("bad validity `{other}`"))),
        });
        entries.push(ModalitySpec {
            kind,
            channels: count,
            params: parse_params(kind, &fields[4..])?,
        });
    };
    let manifest = Manifest::new(entries).map_err(|e| CacheError::Inconsistent(e.to_string()))?;
    if manifest.total_channels() != channels {
        return Err(CacheError::Inconsistent(format!(
            "manifest sums to {} channels, header says {channels}",
            manifest.total_channels()
        )));
    }
    let expected = channels * resolution * resolution * 4;
    if data_bytes != expected {
        return Err(CacheError::Inconsistent(format!(
            "data length {data_bytes} does not match {channels}x{resolution}x{resolution} f32"
        )));
    }
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(CacheError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CacheError::Inconsistent(format!(
            "{} trailing bytes after data",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ConditioningStack::from_parts(resolution, manifest, validity, data)
        .map_err(|e| CacheError::Inconsistent(e.to_string()))
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn cache_write(stack: &ConditioningStack, path: &Path) -> Result<(), CacheError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("cond.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(stack))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn cache_read(path: &Path) -> Result<ConditioningStack, CacheError> {
    decode(&std::fs::read(path)?)
}
