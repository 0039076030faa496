//! Conditioning tensors derived from external extractor outputs.
//!
//! Every modality is encoded into a fixed number of planar channels
//! (`[channels, R, R]`, channel-major) and the per-modality blocks are
//! concatenated in manifest order into a [`ConditioningStack`].

pub mod cache;
pub mod sidecar;
pub mod stub;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xlate_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    Keypoints,
    FaceKeypoints,
    DenseposeParts,
    CocoSeg,
    AdeSeg,
    FaceSeg,
    Depth,
    Edges,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 8] = [
        ModalityKind::Keypoints,
        ModalityKind::FaceKeypoints,
        ModalityKind::DenseposeParts,
        ModalityKind::CocoSeg,
        ModalityKind::AdeSeg,
        ModalityKind::FaceSeg,
        ModalityKind::Depth,
        ModalityKind::Edges,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Keypoints => "keypoints",
            ModalityKind::FaceKeypoints => "face-keypoints",
            ModalityKind::DenseposeParts => "densepose-parts",
            ModalityKind::CocoSeg => "coco-seg",
            ModalityKind::AdeSeg => "ade-seg",
            ModalityKind::FaceSeg => "face-seg",
            ModalityKind::Depth => "depth",
            ModalityKind::Edges => "edges",
        }
    }

    pub fn is_keypoints(self) -> bool {
        matches!(self, ModalityKind::Keypoints | ModalityKind::FaceKeypoints)
    }

    /// Dense per-pixel label maps.
    pub fn is_segmentation(self) -> bool {
        matches!(
            self,
            ModalityKind::DenseposeParts
                | ModalityKind::CocoSeg
                | ModalityKind::AdeSeg
                | ModalityKind::FaceSeg
        )
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown modality `{s}`")))
    }
}

/// Per-modality encoder settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncoderParams {
    /// Gaussian bump per keypoint; points under `min_confidence` are missing.
    Heatmap {
        sigma: f64,
        min_confidence: f64,
    },
    OneHot,
    /// Affine map of `[near, far]` onto `[0, 1]`.
    DepthRange {
        near: f64,
        far: f64,
    },
    /// Values above `threshold` become 1.
    Binary {
        threshold: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub channels: usize,
    pub params: EncoderParams,
}

impl ModalitySpec {
    pub fn keypoints(kind: ModalityKind, channels: usize, sigma: f64) -> Self {
        Self {
            kind,
            channels,
            params: EncoderParams::Heatmap {
                sigma,
                min_confidence: 0.1,
            },
        }
    }

    pub fn segmentation(kind: ModalityKind, classes: usize) -> Self {
        Self {
            kind,
            channels: classes,
            params: EncoderParams::OneHot,
        }
    }

    pub fn depth(near: f64, far: f64) -> Self {
        Self {
            kind: ModalityKind::Depth,
            channels: 1,
            params: EncoderParams::DepthRange { near, far },
        }
    }

    pub fn edges() -> Self {
        Self {
            kind: ModalityKind::Edges,
            channels: 1,
            params: EncoderParams::Binary { threshold: 0.5 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Manifest(format!(
                "`{}` has zero channels",
                self.kind
            )));
        }
        let ok = match self.params {
            EncoderParams::Heatmap { sigma, .. } => {
                self.kind.is_keypoints() && sigma > 0.0 && sigma.is_finite()
            }
            EncoderParams::OneHot => self.kind.is_segmentation(),
            EncoderParams::DepthRange { near, far } => {
                self.kind == ModalityKind::Depth && self.channels == 1 && far > near
            }
            EncoderParams::Binary { .. } => self.kind == ModalityKind::Edges && self.channels == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Manifest(format!(
                "`{}` with {} channels and {:?} is not a valid encoding",
                self.kind, self.channels, self.params
            )))
        }
    }

    /// `key=value` encoder settings, as written into cache headers.
    pub fn params_string(&self) -> String {
        match self.params {
            EncoderParams::Heatmap {
                sigma,
                min_confidence,
            } => format!("sigma={sigma:?} min_confidence={min_confidence:?}"),
            EncoderParams::OneHot => "onehot".into(),
            EncoderParams::DepthRange { near, far } => format!("near={near:?} far={far:?}"),
            EncoderParams::Binary { threshold } => format!("threshold={threshold:?}"),
        }
    }
}

/// Ordered, validated list of modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    entries: Vec<ModalitySpec>,
}

impl Manifest {
    pub fn new(entries: Vec<ModalitySpec>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Manifest("no modalities".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            e.validate()?;
            if !seen.insert(e.kind) {
                return Err(Error::Manifest(format!("`{}` listed twice", e.kind)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ModalitySpec] {
        &self.entries
    }

    pub fn total_channels(&self) -> usize {
        self.entries.iter().map(|e| e.channels).sum()
    }

    pub fn has_dense_segmentation(&self) -> bool {
        self.entries.iter().any(|e| e.kind.is_segmentation())
    }

    /// Offset of each modality's first channel.
    pub fn offsets(&self) -> Vec<usize> {
        self.entries
            .iter()
            .scan(0, |acc, e| {
                let o = *acc;
                *acc += e.channels;
                Some(o)
            })
            .collect()
    }
}

/// One modality's encoded channels, planar `[channels, R, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBlock {
    pub channels: usize,
    pub resolution: usize,
    pub data: Vec<f32>,
}

impl ChannelBlock {
    pub fn zeros(channels: usize, resolution: usize) -> Self {
        Self {
            channels,
            resolution,
            data: vec![0.0; channels * resolution * resolution],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.resolution * self.resolution;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.resolution + y) * self.resolution + x]
    }
}

/// Extractor output for one modality, prior to encoding.
#[derive(Clone, Debug)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Gaussian heatmaps, one channel per keypoint index.
///
/// Pixel `(i, j)` is centred at integer coordinates `(i, j)`. An empty point
/// list is an absent modality and returns `None`.
pub fn encode_keypoints(
    points: &[Keypoint],
    spec: &ModalitySpec,
    resolution: usize,
) -> Result<Option<ChannelBlock>> {
    let EncoderParams::Heatmap {
        sigma,
        min_confidence,
    } = spec.params
    else {
        return Err(Error::Manifest(format!(
            "`{}` is not a keypoint modality",
            spec.kind
        )));
    };
    if points.is_empty() {
        return Ok(None);
    }
    if points.len() != spec.channels {
        return Err(Error::ChannelCount {
            modality: spec.kind.to_string(),
            expected: spec.channels,
            found: points.len(),
        });
    }
    let mut block = ChannelBlock::zeros(spec.channels, resolution);
    let hw = resolution * resolution;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (index, p) in points.iter().enumerate() {
        if !(p.confidence >= min_confidence) {
            continue;
        }
        let limit = resolution as f64;
        if !(p.x >= 0.0 && p.x < limit && p.y >= 0.0 && p.y < limit) {
            return Err(Error::KeypointOutOfBounds {
                index,
                x: p.x,
                y: p.y,
                resolution,
            });
        }
        let plane = &mut block.data[index * hw..(index + 1) * hw];
        for (row, chunk) in plane.chunks_mut(resolution).enumerate() {
            let dy = row as f64 - p.y;
            for (col, v) in chunk.iter_mut().enumerate() {
                let dx = col as f64 - p.x;
                *v = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
    }
    Ok(Some(block))
}

/// One-hot encoding of a row-major label map.
pub fn encode_segmentation(
    labels: &[u32],
    resolution: usize,
    classes: usize,
) -> Result<ChannelBlock> {
    if labels.len() != resolution * resolution {
        return Err(Error::shape(
            "label map",
            resolution * resolution,
            labels.len(),
        ));
    }
    let hw = resolution * resolution;
    let mut block = ChannelBlock::zeros(classes, resolution);
    for (pixel, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                pixel,
                classes,
            });
        }
        block.data[label as usize * hw + pixel] = 1.0;
    }
    Ok(block)
}

pub fn encode_depth(depth: &[f64], resolution: usize, near: f64, far: f64) -> Result<ChannelBlock> {
    if !(far > near) {
        return Err(Error::Manifest(format!(
            "depth range needs far > near, got [{near}, {far}]"
        )));
    }
    if depth.len() != resolution * resolution {
        return Err(Error::shape(
            "depth map",
            resolution * resolution,
            depth.len(),
        ));
    }
    if let Some(pixel) = depth.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "depth map".into(),
            pixel,
        });
    }
    let span = far - near;
    Ok(ChannelBlock {
        channels: 1,
        resolution,
        data: depth
            .iter()
            .map(|&d| ((d - near) / span).clamp(0.0, 1.0) as f32)
            .collect(),
    })
}

pub fn encode_edges(map: &[f64], resolution: usize, threshold: f64) -> Result<ChannelBlock> {
    if map.len() != resolution * resolution {
        return Err(Error::shape("edge map", resolution * resolution, map.len()));
    }
    Ok(ChannelBlock {
        channels: 1,
        resolution,
        data: map
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// The network input `c = Φ(x)`: all modalities concatenated in manifest
/// order. Absent modalities are zero and flagged in the validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningStack {
    resolution: usize,
    manifest: Manifest,
    validity: Vec<bool>,
    data: Vec<f32>,
}

/// Concatenates per-modality blocks; `None` marks an absent modality.
pub fn assemble_stack(
    blocks: Vec<Option<ChannelBlock>>,
    manifest: &Manifest,
    resolution: usize,
) -> Result<ConditioningStack> {
    if blocks.len() != manifest.entries().len() {
        return Err(Error::shape(
            "modality blocks",
            manifest.entries().len(),
            blocks.len(),
        ));
    }
    let hw = resolution * resolution;
    let mut data = Vec::with_capacity(manifest.total_channels() * hw);
    let mut validity = Vec::with_capacity(blocks.len());
    for (spec, block) in manifest.entries().iter().zip(blocks) {
        match block {
            Some(b) => {
                if b.channels != spec.channels {
                    return Err(Error::ChannelCount {
                        modality: spec.kind.to_string(),
                        expected: spec.channels,
                        found: b.channels,
                    });
                }
                if b.resolution != resolution || b.data.len() != b.channels * hw {
                    return Err(Error::shape(
                        &format!("modality `{}`", spec.kind),
                        format!("{resolution}x{resolution}"),
                        format!("{}x{}", b.resolution, b.resolution),
                    ));
                }
                data.extend_from_slice(&b.data);
                validity.push(true);
            }
            None => {
                data.extend(std::iter::repeat_n(0.0, spec.channels * hw));
                validity.push(false);
            }
        }
    }
    ConditioningStack::from_parts(resolution, manifest.clone(), validity, data)
}

impl ConditioningStack {
    pub(crate) fn from_parts(
        resolution: usize,
        manifest: Manifest,
        validity: Vec<bool>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let hw = resolution * resolution;
        if data.len() != manifest.total_channels() * hw {
            return Err(Error::shape(
                "conditioning data",
                manifest.total_channels() * hw,
                data.len(),
            ));
        }
        if validity.len() != manifest.entries().len() {
            return Err(Error::shape(
                "validity mask",
                manifest.entries().len(),
                validity.len(),
            ));
        }
        if let Some(pixel) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "conditioning".into(),
                pixel,
            });
        }
        for ((spec, offset), &valid) in manifest
            .entries()
            .iter()
            .zip(manifest.offsets())
            .zip(&validity)
        {
            let chunk = &data[offset * hw..(offset + spec.channels) * hw];
            let in_range = match spec.params {
                EncoderParams::OneHot | EncoderParams::Binary { .. } => {
                    chunk.iter().all(|&v| v == 0.0 || v == 1.0)
                }
                _ => chunk.iter().all(|&v| (0.0..=1.0).contains(&v)),
            };
            if !in_range {
                return Err(Error::Manifest(format!(
                    "`{}` channels violate their value range",
                    spec.kind
                )));
            }
            if !valid && chunk.iter().any(|&v| v != 0.0) {
                return Err(Error::Manifest(format!(
                    "`{}` is flagged absent but has nonzero channels",
                    spec.kind
                )));
            }
        }
        Ok(Self {
            resolution,
            manifest,
            validity,
            data,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn channels(&self) -> usize {
        self.manifest.total_channels()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.resolution * self.resolution;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// `[d, R, R]` as a network input.
    pub fn to_tensor(&self) -> Tensor {
        let r = self.resolution;
        Tensor::new(
            &[self.channels(), r, r],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Stacks conditioning into an `[N, d, R, R]` batch.
    pub fn batch(stacks: &[&ConditioningStack]) -> Tensor {
        let parts: Vec<Tensor> = stacks
            .iter()
            .map(|s| {
                let t = s.to_tensor();
                let shape = [1, t.shape()[0], t.shape()[1], t.shape()[2]];
                t.reshape(&shape)
            })
            .collect();
        Tensor::stack_outer(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp_spec(channels: usize, sigma: f64) -> ModalitySpec {
        ModalitySpec::keypoints(ModalityKind::Keypoints, channels, sigma)
    }

    fn pt(x: f64, y: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            confidence: 1.0,
        }
    }

    #[test]
    fn empty_keypoints_are_absent() {
        assert!(encode_keypoints(&[], &kp_spec(3, 2.0), 16)
            .unwrap()
            .is_none());
    }

    #[test]
    fn keypoint_peak_and_falloff() {
        let b = encode_keypoints(&[pt(10.0, 10.0)], &kp_spec(1, 2.0), 32)
            .unwrap()
            .unwrap();
        assert_eq!(b.at(0, 10, 10), 1.0);
        // exp(-16 / 8), evaluated independently.
        assert!((b.at(0, 10, 14) as f64 - 0.135_335_283_236_612_7).abs() < 1e-7);
        assert!((b.at(0, 14, 10) as f64 - 0.135_335_283_236_612_7).abs() < 1e-7);
    }

    #[test]
    fn low_confidence_keypoint_is_zero_channel() {
        let pts = [
            pt(3.0, 3.0),
            Keypoint {
                x: -5.0,
                y: 0.0,
                confidence: 0.0,
            },
        ];
        let b = encode_keypoints(&pts, &kp_spec(2, 1.0), 8)
            .unwrap()
            .unwrap();
        assert!(b.plane(1).iter().all(|&v| v == 0.0));
        assert_eq!(b.at(0, 3, 3), 1.0);
    }

    #[test]
    fn keypoint_errors() {
        match encode_keypoints(&[pt(1.0, 1.0), pt(8.0, 2.0)], &kp_spec(2, 1.0), 8) {
            Err(Error::KeypointOutOfBounds { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            encode_keypoints(&[pt(1.0, 1.0)], &kp_spec(2, 1.0), 8),
            Err(Error::ChannelCount { .. })
        ));
    }

    #[test]
    fn segmentation_uniform_and_checkerboard() {
        let b = encode_segmentation(&[0; 16], 4, 3).unwrap();
        assert!(b.plane(0).iter().all(|&v| v == 1.0));
        assert!(b.plane(1).iter().chain(b.plane(2)).all(|&v| v == 0.0));

        let checker: Vec<u32> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as u32).collect();
        let b = encode_segmentation(&checker, 4, 2).unwrap();
        for (i, &c) in checker.iter().enumerate() {
            assert_eq!(b.plane(0)[i] + b.plane(1)[i], 1.0);
            assert_eq!(b.plane(1)[i], c as f32);
        }
    }

    #[test]
    fn segmentation_rejects_large_label() {
        match encode_segmentation(&[0, 1, 5, 0], 2, 3) {
            Err(Error::LabelOutOfRange { label, pixel, .. }) => assert_eq!((label, pixel), (5, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn depth_affine_and_errors() {
        let near = 2.0;
        let far = 10.0;
        let b = encode_depth(&[near, far, 6.0, 100.0], 2, near, far).unwrap();
        assert_eq!(b.data, vec![0.0, 1.0, 0.5, 1.0]);
        assert!(encode_depth(&[0.0; 4], 2, 1.0, 1.0).is_err());
        assert!(matches!(
            encode_depth(&[0.0, f64::NAN, 0.0, 0.0], 2, 0.0, 1.0),
            Err(Error::NonFinite { pixel: 1, .. })
        ));
    }

    fn manifest_kd() -> Manifest {
        Manifest::new(vec![kp_spec(18, 3.0), ModalitySpec::depth(0.0, 1.0)]).unwrap()
    }

    #[test]
    fn stack_channel_arithmetic() {
        let m = manifest_kd();
        let s = assemble_stack(vec![None, Some(ChannelBlock::zeros(1, 4))], &m, 4).unwrap();
        assert_eq!(s.channels(), 19);
        assert_eq!(s.validity(), &[false, true]);
    }

    #[test]
    fn single_modality_stack_is_the_block() {
        let m = Manifest::new(vec![ModalitySpec::segmentation(ModalityKind::FaceSeg, 2)]).unwrap();
        let block = encode_segmentation(&[0, 1, 1, 0], 2, 2).unwrap();
        let s = assemble_stack(vec![Some(block.clone())], &m, 2).unwrap();
        assert_eq!(s.data(), &block.data[..]);
    }

    #[test]
    fn permuted_manifest_permutes_channels() {
        let seg = ModalitySpec::segmentation(ModalityKind::CocoSeg, 2);
        let dep = ModalitySpec::depth(0.0, 4.0);
        let sb = encode_segmentation(&[0, 1, 1, 1], 2, 2).unwrap();
        let db = encode_depth(&[0.0, 1.0, 2.0, 3.0], 2, 0.0, 4.0).unwrap();
        let m1 = Manifest::new(vec![seg.clone(), dep.clone()]).unwrap();
        let m2 = Manifest::new(vec![dep, seg]).unwrap();
        let s1 = assemble_stack(vec![Some(sb.clone()), Some(db.clone())], &m1, 2).unwrap();
        let s2 = assemble_stack(vec![Some(db), Some(sb)], &m2, 2).unwrap();
        // channel k of s1 maps to channel perm[k] of s2
        let perm = [1, 2, 0];
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(s1.plane(k), s2.plane(p));
        }
        assert_ne!(s1, s2);
    }

    #[test]
    fn stack_rejects_mismatched_block() {
        let m = manifest_kd();
        match assemble_stack(vec![Some(ChannelBlock::zeros(17, 4)), None], &m, 4) {
            Err(Error::ChannelCount { modality, .. }) => assert_eq!(modality, "keypoints"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(assemble_stack(vec![None, Some(ChannelBlock::zeros(1, 8))], &m, 4).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_zero_channels() {
        assert!(Manifest::new(vec![ModalitySpec::edges(), ModalitySpec::edges()]).is_err());
        assert!(Manifest::new(vec![kp_spec(0, 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn segmentation_is_partition_of_unity(labels in prop::collection::vec(0u32..5, 64)) {
            let b = encode_segmentation(&labels, 8, 5).unwrap();
            for p in 0..64 {
                let s: f32 = (0..5).map(|c| b.plane(c)[p]).sum();
                prop_assert_eq!(s, 1.0);
            }
        }

        #[test]
        fn heatmaps_are_translation_covariant(
            x in 8.0f64..20.0, y in 8.0f64..20.0, dx in -4i32..4, dy in -4i32..4,
        ) {
            let spec = kp_spec(1, 1.5);
            let a = encode_keypoints(&[pt(x, y)], &spec, 32).unwrap().unwrap();
            let b = encode_keypoints(&[pt(x + dx as f64, y + dy as f64)], &spec, 32).unwrap().unwrap();
            for row in 4..28 {
                for col in 4..28 {
                    let shifted = b.at(0, (col + dx) as usize, (row + dy) as usize);
                    prop_assert!((a.at(0, col as usize, row as usize) - shifted).abs() < 1e-6);
                }
            }
        }
    }
}
