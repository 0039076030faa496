//! Ingestion of per-image extractor outputs.
//!
//! For image `<id>` of a domain the sidecars live in `<domain>/sidecars/`:
//!
//! * keypoint modalities: `<id>.<modality>.txt`, one point per line in
//!   channel order, `name x y confidence` (`#` starts a comment). Missing
//!   points are written with confidence 0.
//! * segmentation modalities: `<id>.<modality>.png`, 8-bit grayscale, the
//!   gray value is the class index.
//! * `depth`: `<id>.depth.png`, 8- or 16-bit grayscale raw depth, mapped
//!   through the modality's `near`/`far` range.
//! * `edges`: `<id>.edges.png`, grayscale, values above half scale are edges.
//!
//! A missing sidecar file marks the modality absent for that image.

use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::{
    assemble_stack, encode_depth, encode_edges, encode_keypoints, encode_segmentation,
    ChannelBlock, ConditioningStack, EncoderParams, Keypoint, Manifest, ModalitySpec,
};
use crate::error::{Error, Result};

pub fn sidecar_path(dir: &Path, id: &str, spec: &ModalitySpec) -> PathBuf {
    let ext = if spec.kind.is_keypoints() {
        "txt"
    } else {
        "png"
    };
    dir.join(format!("{id}.{}.{ext}", spec.kind))
}

pub fn parse_keypoints(text: &str) -> Result<Vec<Keypoint>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Dataset(format!("keypoint line {}: bad number `{s}`", lineno + 1))
            })
        };
        if fields.len() != 4 {
            return Err(Error::Dataset(format!(
                "keypoint line {}: expected `name x y confidence`",
                lineno + 1
            )));
        }
        out.push(Keypoint {
            x: parse(fields[1])?,
            y: parse(fields[2])?,
            confidence: parse(fields[3])?,
        });
    }
    Ok(out)
}

pub fn format_keypoints(names: &[&str], points: &[Keypoint]) -> String {
    names
        .iter()
        .zip(points)
        .map(|(n, p)| format!("{n} {} {} {}\n", p.x, p.y, p.confidence))
        .collect()
}

fn gray_values(img: DynamicImage, resolution: usize, path: &Path) -> Result<Vec<f64>> {
    if img.width() as usize != resolution || img.height() as usize != resolution {
        return Err(Error::shape(
            &format!("sidecar {}", path.display()),
            format!("{resolution}x{resolution}"),
            format!("{}x{}", img.width(), img.height()),
        ));
    }
    Ok(match img {
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(f64::from).collect(),
        other => other
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(f64::from)
            .collect(),
    })
}

/// Reads and encodes one modality; `Ok(None)` when the sidecar is absent.
pub fn load_block(
    dir: &Path,
    id: &str,
    spec: &ModalitySpec,
    resolution: usize,
) -> Result<Option<ChannelBlock>> {
    let path = sidecar_path(dir, id, spec);
    if !path.exists() {
        return Ok(None);
    }
    match spec.params {
        EncoderParams::Heatmap { .. } => {
            let pts = parse_keypoints(&std::fs::read_to_string(&path)?)?;
            encode_keypoints(&pts, spec, resolution)
        }
        EncoderParams::OneHot => {
            let img = image::open(&path)?;
            let labels: Vec<u32> = gray_values(img, resolution, &path)?
                .into_iter()
                .map(|v| v as u32)
                .collect();
            encode_segmentation(&labels, resolution, spec.channels).map(Some)
        }
        EncoderParams::DepthRange { near, far } => {
            let img = image::open(&path)?;
            encode_depth(&gray_values(img, resolution, &path)?, resolution, near, far).map(Some)
        }
        EncoderParams::Binary { .. } => {
            let img = image::open(&path)?;
            let max = match img {
                DynamicImage::ImageLuma16(_) => 65535.0,
                _ => 255.0,
            };
            let vals: Vec<f64> = gray_values(img, resolution, &path)?
                .into_iter()
                .map(|v| v / max)
                .collect();
            encode_edges(&vals, resolution, 0.5).map(Some)
        }
    }
}

/// Per-modality load outcome, in manifest order.
pub struct SidecarReport {
    pub stack: ConditioningStack,
    pub missing: Vec<String>,
}

pub fn load_stack(
    dir: &Path,
    id: &str,
    manifest: &Manifest,
    resolution: usize,
) -> Result<SidecarReport> {
    let mut blocks = Vec::new();
    let mut missing = Vec::new();
    for spec in manifest.entries() {
        let b = load_block(dir, id, spec, resolution)?;
        if b.is_none() {
            missing.push(spec.kind.to_string());
        }
        blocks.push(b);
    }
    Ok(SidecarReport {
        stack: assemble_stack(blocks, manifest, resolution)?,
        missing,
    })
}
