//! Procedural stick-figure datasets with exact conditioning, for tests,
//! benches and smoke runs.
//!
//! Every figure has seven keypoints, a three-class part map
//! (background, body, head), a depth map and an edge map. Domain `a` draws
//! with a warm palette, every other domain with a cool one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlate_tensor::Tensor;

use crate::conditioning::sidecar::{format_keypoints, sidecar_path};
use crate::conditioning::{
    assemble_stack, encode_depth, encode_edges, encode_keypoints, encode_segmentation,
    ConditioningStack, EncoderParams, Keypoint, Manifest, ModalityKind, ModalitySpec,
};
use crate::config::{ModelConfig, RunConfig, Variant};
use crate::dataset::{Split, SPLIT_FILE};
use crate::domain::{DomainId, ImageTensor};
use crate::error::Result;
use crate::model::component_seed;
use crate::trainer::{TrainingSample, TrainingSet};

pub const KEYPOINT_NAMES: [&str; 7] = [
    "head",
    "neck",
    "hip",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
];
const LIMBS: [(usize, usize); 6] = [(1, 2), (1, 3), (1, 4), (2, 5), (2, 6), (0, 1)];

pub fn fixture_manifest(resolution: usize) -> Manifest {
    let sigma = (2.0 * resolution as f64 / 64.0).max(1.0);
    Manifest::new(vec![
        ModalitySpec::keypoints(ModalityKind::Keypoints, 7, sigma),
        ModalitySpec::segmentation(ModalityKind::DenseposeParts, 3),
        ModalitySpec::depth(0.0, 255.0),
        ModalitySpec::edges(),
    ])
    .expect("fixture manifest is valid")
}

/// Smallest practical configuration: 32x32, very narrow layers.
pub fn tiny_config(variant: Variant, domains: &[&str]) -> RunConfig {
    let mut c = RunConfig::new(32, variant, domains, &fixture_manifest(32));
    c.model = ModelConfig {
        width_mult: 0.0625,
        style_dim: 8,
        fusion_hidden: 64,
        ..ModelConfig::default()
    };
    c.batch_size = 2;
    c.steps = 10;
    c
}

/// 64x64 configuration used for overfit runs.
pub fn desk_config(variant: Variant, domains: &[&str]) -> RunConfig {
    let mut c = RunConfig::new(64, variant, domains, &fixture_manifest(64));
    c.model = ModelConfig::desk();
    c
}

#[derive(Clone, Debug)]
pub struct Figure {
    pub id: String,
    pub image: ImageTensor,
    pub keypoints: Vec<Keypoint>,
    pub labels: Vec<u32>,
    /// Raw depth in `[0, 255]`.
    pub depth: Vec<f64>,
    pub edges: Vec<f64>,
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn palette(domain: &DomainId, rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3], [f64; 3], [f64; 3]) {
    fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
        c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
    }
    if domain.as_str() == "a" {
        let shirts = [
            [0.85, 0.2, 0.15],
            [0.95, 0.55, 0.1],
            [0.55, 0.3, 0.1],
            [0.9, 0.8, 0.2],
        ];
        let shirt = shirts[rng.random_range(0..shirts.len())];
        (
            jitter(rng, [0.95, 0.82, 0.6], 0.08),
            jitter(rng, shirt, 0.1),
            jitter(rng, [0.35, 0.2, 0.12], 0.08),
            jitter(rng, [0.95, 0.75, 0.6], 0.05),
        )
    } else {
        let shirts = [
            [0.15, 0.3, 0.85],
            [0.1, 0.7, 0.7],
            [0.5, 0.25, 0.8],
            [0.2, 0.6, 0.3],
        ];
        let shirt = shirts[rng.random_range(0..shirts.len())];
        (
            jitter(rng, [0.6, 0.75, 0.92], 0.08),
            jitter(rng, shirt, 0.1),
            jitter(rng, [0.15, 0.15, 0.3], 0.08),
            jitter(rng, [0.75, 0.65, 0.7], 0.05),
        )
    }
}

/// Deterministic figure `index` of `domain`.
pub fn render_figure(domain: &DomainId, index: usize, seed: u64, resolution: usize) -> Figure {
    let mut rng =
        ChaCha8Rng::seed_from_u64(component_seed(seed, &format!("figure.{domain}.{index}")));
    let r = resolution as f64;
    let cx = r * rng.random_range(0.38..0.62);
    let s = r * rng.random_range(0.85..1.05);
    let top = r * 0.5 - 0.4 * s;
    let head = (cx + s * rng.random_range(-0.03..0.03), top + 0.1 * s);
    let neck = (cx, top + 0.24 * s);
    let hip = (cx + s * rng.random_range(-0.05..0.05), top + 0.52 * s);
    let arm = |side: f64, rng: &mut ChaCha8Rng| {
        let ang: f64 = rng.random_range(0.3..1.6);
        let len = 0.28 * s;
        (neck.0 + side * len * ang.sin(), neck.1 + len * ang.cos())
    };
    let lh = arm(-1.0, &mut rng);
    let rh = arm(1.0, &mut rng);
    let leg = |side: f64, rng: &mut ChaCha8Rng| {
        let ang: f64 = rng.random_range(0.05..0.5);
        let len = 0.3 * s;
        (hip.0 + side * len * ang.sin(), hip.1 + len * ang.cos())
    };
    let lf = leg(-1.0, &mut rng);
    let rf = leg(1.0, &mut rng);
    let clampp = |p: (f64, f64)| (p.0.clamp(0.0, r - 1.0), p.1.clamp(0.0, r - 1.0));
    let joints = [head, neck, hip, lh, rh, lf, rf].map(clampp);
    let (bg, shirt, pants, skin) = palette(domain, &mut rng);

    let n = resolution * resolution;
    let mut labels = vec![0u32; n];
    let mut depth = vec![0.0; n];
    let mut pix = vec![0.0; 3 * n];
    let head_r = 0.09 * s;
    let torso_w = 0.07 * s;
    let limb_w = 0.035 * s;
    for y in 0..resolution {
        for x in 0..resolution {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * resolution + x;
            let dh = ((p.0 - joints[0].0).powi(2) + (p.1 - joints[0].1).powi(2)).sqrt();
            let mut best = (f64::INFINITY, 0usize);
            for (k, &(a, b)) in LIMBS.iter().enumerate() {
                let w = if k == 0 { torso_w } else { limb_w };
                let d = seg_dist(p, joints[a], joints[b]) - w;
                if d < best.0 {
                    best = (d, k);
                }
            }
            let t = y as f64 / r;
            let (label, color, z) = if dh <= head_r {
                (2, skin.map(|c| c * (1.0 - 0.25 * dh / head_r)), 70.0)
            } else if best.0 <= 0.0 {
                let c = if best.1 == 3 || best.1 == 4 {
                    pants
                } else {
                    shirt
                };
                let shade = 1.0 + 0.6 * best.0 / limb_w.max(1e-9) * 0.25;
                (1, c.map(|v| v * shade), 90.0 + 30.0 * t)
            } else {
                (0, bg.map(|v| v * (0.8 + 0.3 * t)), 160.0 + 80.0 * t)
            };
            labels[i] = label;
            depth[i] = f64::round(z);
            for c in 0..3 {
                pix[c * n + i] = color[c].clamp(0.0, 1.0) * 2.0 - 1.0;
            }
        }
    }
    let mut edges = vec![0.0; n];
    for y in 0..resolution {
        for x in 0..resolution {
            let l = labels[y * resolution + x];
            let diff = [(1i64, 0i64), (0, 1)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < resolution as i64
                    && ny < resolution as i64
                    && labels[ny as usize * resolution + nx as usize] != l
            });
            if diff {
                edges[y * resolution + x] = 1.0;
            }
        }
    }
    let image = ImageTensor::new(
        Tensor::new(&[3, resolution, resolution], pix),
        domain.clone(),
    )
    .expect("figure pixels in range");
    Figure {
        id: format!("{domain}{index:04}"),
        image,
        keypoints: joints
            .iter()
            .map(|&(x, y)| Keypoint {
                x: x.floor(),
                y: y.floor(),
                confidence: 1.0,
            })
            .collect(),
        labels,
        depth,
        edges,
    }
}

impl Figure {
    /// Conditioning for `manifest`; modalities the figure cannot provide
    /// are marked absent.
    pub fn stack(&self, manifest: &Manifest) -> Result<ConditioningStack> {
        let r = self.image.resolution();
        let blocks = manifest
            .entries()
            .iter()
            .map(|spec| {
                Ok(match (spec.kind, spec.params) {
                    (k, _) if k.is_keypoints() && spec.channels == self.keypoints.len() => {
                        encode_keypoints(&self.keypoints, spec, r)?
                    }
                    (ModalityKind::DenseposeParts, _) if spec.channels == 3 => {
                        Some(encode_segmentation(&self.labels, r, 3)?)
                    }
                    (ModalityKind::Depth, EncoderParams::DepthRange { near, far }) => {
                        Some(encode_depth(&self.depth, r, near, far)?)
                    }
                    (ModalityKind::Edges, EncoderParams::Binary { threshold }) => {
                        Some(encode_edges(&self.edges, r, threshold)?)
                    }
                    _ => None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_stack(blocks, manifest, r)
    }

    pub fn sample(&self, manifest: &Manifest) -> Result<TrainingSample> {
        Ok(TrainingSample::new(
            self.id.clone(),
            self.image.clone(),
            self.stack(manifest)?,
        ))
    }
}

/// `n` in-memory training samples per configured domain.
pub fn training_set(config: &RunConfig, n: usize) -> Result<TrainingSet> {
    let manifest = config.manifest()?;
    let mut out = BTreeMap::new();
    for d in &config.domains {
        let samples = (0..n)
            .map(|i| render_figure(d, i, config.seed, config.resolution).sample(&manifest))
            .collect::<Result<Vec<_>>>()?;
        out.insert(d.clone(), samples);
    }
    Ok(out)
}

fn gray_png(values: &[f64], resolution: usize, scale: f64, path: &Path) -> Result<()> {
    let buf: Vec<u8> = values
        .iter()
        .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::GrayImage::from_raw(resolution as u32, resolution as u32, buf)
        .expect("sized buffer")
        .save(path)?;
    Ok(())
}

/// Writes a dataset in the on-disk layout: images, sidecars and split file.
/// Conditioning caches are left for `extract`.
pub fn write_dataset(
    root: &Path,
    domains: &[&str],
    n_train: usize,
    n_val: usize,
    resolution: usize,
    seed: u64,
) -> Result<()> {
    let manifest = fixture_manifest(resolution);
    for d in domains {
        let domain = DomainId::new(*d);
        let dir = root.join(d);
        let side = dir.join("sidecars");
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(&side)?;
        let mut split = String::new();
        for i in 0..n_train + n_val {
            let f = render_figure(&domain, i, seed, resolution);
            f.image
                .save_png(&dir.join("images").join(format!("{}.png", f.id)))?;
            for spec in manifest.entries() {
                let path = sidecar_path(&side, &f.id, spec);
                match spec.kind {
                    ModalityKind::Keypoints => {
                        std::fs::write(&path, format_keypoints(&KEYPOINT_NAMES, &f.keypoints))?
                    }
                    ModalityKind::DenseposeParts => {
                        let l: Vec<f64> = f.labels.iter().map(|&v| v as f64).collect();
                        gray_png(&l, resolution, 1.0, &path)?
                    }
                    ModalityKind::Depth => gray_png(&f.depth, resolution, 1.0, &path)?,
                    _ => gray_png(&f.edges, resolution, 255.0, &path)?,
                }
            }
            let which = if i < n_train {
                Split::Train
            } else {
                Split::Val
            };
            split.push_str(&format!("{} {}\n", which.as_str(), f.id));
        }
        std::fs::write(dir.join(SPLIT_FILE), split)?;
    }
    Ok(())
}
