//! Run configuration, read from a TOML key/value file.
//!
//! ```toml
//! data_root = "fixtures"
//! resolution = 64
//! variant = "E"
//! domains = ["a", "b"]
//! batch_size = 4
//! steps = 2000
//! seed = 7
//!
//! [model]
//! width_mult = 0.125
//! style_dim = 64
//!
//! [[modality]]
//! id = "keypoints"
//! channels = 7
//! sigma = 2.0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditioning::{EncoderParams, Manifest, ModalityKind, ModalitySpec};
use crate::domain::DomainId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Rungs of the ablation ladder, from plain SPADE (A) to the full model (E).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    /// C onwards encode conditioning with the shared content encoder.
    pub fn has_content_encoder(self) -> bool {
        self >= Variant::C
    }

    /// A to C use the variational image encoder feeding the decoder input.
    pub fn variational_style(self) -> bool {
        self <= Variant::C
    }

    /// D onwards fuse the style vector into every denormalization.
    pub fn fused_style(self) -> bool {
        self >= Variant::D
    }

    /// Only E gives each domain its own style encoder and discriminator.
    pub fn per_domain_bundles(self) -> bool {
        self == Variant::E
    }

    pub fn requires_dense_segmentation(self) -> bool {
        self == Variant::A
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid("variant", format!("`{s}` is not one of A, B, C, D, E")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Multiplies every channel width of the full-size architecture.
    pub width_mult: f64,
    pub style_dim: usize,
    /// Hidden width of each fusion module before `width_mult`.
    pub fusion_hidden: usize,
    /// Convolutions in a fusion module before the scale/bias heads.
    pub fusion_layers: usize,
    /// Gain of the scale/bias head initialization.
    pub fusion_head_gain: f64,
    pub disc_scales: usize,
    pub disc_layers: usize,
    /// Emit the 32x32 content level after that stage's residual block.
    pub level32_after_residual: bool,
    /// Feed resized conditioning to the discriminator as extra channels.
    pub conditional_discriminator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_mult: 1.0,
            style_dim: 256,
            fusion_hidden: 128,
            fusion_layers: 2,
            fusion_head_gain: 0.1,
            disc_scales: 2,
            disc_layers: 4,
            level32_after_residual: true,
            conditional_discriminator: false,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for 64x64 runs on a CPU.
    pub fn desk() -> Self {
        Self {
            width_mult: 0.125,
            style_dim: 64,
            ..Self::default()
        }
    }

    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_mult).round() as usize).max(4)
    }

    /// Width of the content feature map at resolution `r`.
    pub fn content_width(&self, r: usize) -> usize {
        match r {
            8 | 16 => self.scaled(512),
            32 => self.scaled(256),
            _ => self.scaled((16384 / r).clamp(64, 256)),
        }
    }

    pub fn decoder_width(&self, r: usize) -> usize {
        self.scaled((16384 / r).clamp(64, 512))
    }

    pub fn style_width(&self, r: usize) -> usize {
        self.scaled((16384 / r).clamp(64, 256))
    }

    pub fn disc_width(&self, layer: usize) -> usize {
        self.scaled((64 << layer).min(512))
    }

    pub fn fusion_width(&self) -> usize {
        self.scaled(self.fusion_hidden)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.width_mult > 0.0) {
            return Err(invalid("model.width_mult", "must be positive"));
        }
        if self.style_dim == 0 {
            return Err(invalid("model.style_dim", "must be positive"));
        }
        if self.fusion_layers == 0 {
            return Err(invalid("model.fusion_layers", "need at least one layer"));
        }
        if self.disc_scales == 0 || self.disc_layers == 0 {
            return Err(invalid(
                "model.disc_scales",
                "need at least one scale and layer",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_vgg: f64,
    pub lambda_feat: f64,
    pub lambda_adv: f64,
    pub lambda_kl: f64,
    /// Perceptual probe tap weights, shallow to deep.
    pub perceptual_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_vgg: 10.0,
            lambda_feat: 10.0,
            lambda_adv: 1.0,
            lambda_kl: 0.05,
            perceptual_weights: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
        }
    }
}

/// One `[[modality]]` table. Which optional keys apply depends on `id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub id: ModalityKind,
    pub channels: Option<usize>,
    pub sigma: Option<f64>,
    pub min_confidence: Option<f64>,
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub threshold: Option<f64>,
}

impl ModalityEntry {
    pub fn from_spec(spec: &ModalitySpec) -> Self {
        let mut e = Self {
            id: spec.kind,
            channels: Some(spec.channels),
            sigma: None,
            min_confidence: None,
            near: None,
            far: None,
            threshold: None,
        };
        match spec.params {
            EncoderParams::Heatmap {
                sigma,
                min_confidence,
            } => {
                e.sigma = Some(sigma);
                e.min_confidence = Some(min_confidence);
            }
            EncoderParams::OneHot => {}
            EncoderParams::DepthRange { near, far } => {
                e.near = Some(near);
                e.far = Some(far);
            }
            EncoderParams::Binary { threshold } => e.threshold = Some(threshold),
        }
        e
    }

    fn to_spec(&self, resolution: usize) -> Result<ModalitySpec, ConfigError> {
        let key = format!("modality.{}", self.id);
        let need_channels = || {
            self.channels
                .ok_or_else(|| invalid(&format!("{key}.channels"), "required for this modality"))
        };
        let spec = if self.id.is_keypoints() {
            ModalitySpec {
                kind: self.id,
                channels: need_channels()?,
                params: EncoderParams::Heatmap {
                    sigma: self.sigma.unwrap_or(3.0 * resolution as f64 / 256.0),
                    min_confidence: self.min_confidence.unwrap_or(0.1),
                },
            }
        } else if self.id.is_segmentation() {
            ModalitySpec::segmentation(self.id, need_channels()?)
        } else if self.id == ModalityKind::Depth {
            ModalitySpec::depth(self.near.unwrap_or(0.0), self.far.unwrap_or(255.0))
        } else {
            ModalitySpec {
                kind: self.id,
                channels: 1,
                params: EncoderParams::Binary {
                    threshold: self.threshold.unwrap_or(0.5),
                },
            }
        };
        spec.validate().map_err(|e| invalid(&key, e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub domains: Vec<DomainId>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cadence")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(rename = "modality")]
    pub modalities: Vec<ModalityEntry>,
}

fn default_resolution() -> usize {
    256
}
fn default_variant() -> Variant {
    Variant::E
}
fn default_batch() -> usize {
    4
}
fn default_steps() -> u64 {
    2000
}
fn default_cadence() -> u64 {
    500
}

impl RunConfig {
    pub fn new(resolution: usize, variant: Variant, domains: &[&str], manifest: &Manifest) -> Self {
        Self {
            data_root: None,
            resolution,
            variant,
            domains: domains.iter().map(|d| DomainId::new(*d)).collect(),
            batch_size: default_batch(),
            steps: default_steps(),
            seed: 0,
            checkpoint_every: default_cadence(),
            model: if resolution <= 64 {
                ModelConfig::desk()
            } else {
                ModelConfig::default()
            },
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            modalities: manifest
                .entries()
                .iter()
                .map(ModalityEntry::from_spec)
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(root) = &cfg.data_root {
            if root.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data_root = Some(dir.join(root));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn manifest(&self) -> Result<Manifest, ConfigError> {
        let specs = self
            .modalities
            .iter()
            .map(|m| m.to_spec(self.resolution))
            .collect::<Result<Vec<_>, _>>()?;
        Manifest::new(specs).map_err(|e| invalid("modality", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = self.resolution;
        if r < 32 || !r.is_power_of_two() {
            return Err(invalid("resolution", "must be a power of two, at least 32"));
        }
        if self.domains.is_empty() {
            return Err(invalid("domains", "need at least one domain"));
        }
        let mut sorted = self.domains.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.domains.len() {
            return Err(invalid("domains", "duplicate domain"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        self.model.validate()?;
        if self.loss.perceptual_weights.len() != crate::probe::PERCEPTUAL_TAPS {
            return Err(invalid(
                "loss.perceptual_weights",
                format!("need {} weights", crate::probe::PERCEPTUAL_TAPS),
            ));
        }
        if self.loss.perceptual_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid(
                "loss.perceptual_weights",
                "weights must be nonnegative",
            ));
        }
        let manifest = self.manifest()?;
        if self.variant.requires_dense_segmentation() && !manifest.has_dense_segmentation() {
            return Err(invalid(
                "variant",
                "variant A expects a dense segmentation modality in the manifest",
            ));
        }
        Ok(())
    }

    /// Digest of everything that determines parameter shapes and meaning.
    pub fn structure_hash(&self) -> String {
        let key = serde_json::json!({
            "resolution": self.resolution,
            "variant": self.variant,
            "domains": self.domains,
            "model": self.model,
            "modalities": self.modalities,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        resolution = 64
        variant = "E"
        domains = ["a", "b"]
        seed = 3

        [model]
        width_mult = 0.125
        style_dim = 64

        [[modality]]
        id = "keypoints"
        channels = 7
        sigma = 2.0

        [[modality]]
        id = "depth"
        near = 0.0
        far = 255.0
    "#;

    #[test]
    fn parses_and_builds_manifest() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.manifest().unwrap().total_channels(), 8);
        assert_eq!(cfg.optim.lr_d, 4e-4);
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err =
            RunConfig::parse(&format!("{SAMPLE}\n[optim]\nlearning_rate = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn variant_a_requires_dense_segmentation() {
        let err =
            RunConfig::parse(&SAMPLE.replace("variant = \"E\"", "variant = \"A\"")).unwrap_err();
        assert!(err.to_string().contains("segmentation"), "{err}");
    }

    #[test]
    fn structure_hash_tracks_manifest() {
        let a = RunConfig::parse(SAMPLE).unwrap();
        let mut b = a.clone();
        b.modalities[0].sigma = Some(2.5);
        assert_ne!(a.structure_hash(), b.structure_hash());
        let mut c = a.clone();
        c.steps = 9;
        assert_eq!(a.structure_hash(), c.structure_hash());
    }

    #[test]
    fn full_scale_widths() {
        let m = ModelConfig::default();
        assert_eq!(
            [m.content_width(32), m.content_width(16), m.content_width(8)],
            [256, 512, 512]
        );
        assert_eq!(m.decoder_width(256), 64);
        assert_eq!(m.decoder_width(8), 512);
        assert_eq!(m.disc_width(0), 64);
        assert_eq!(m.disc_width(3), 512);
    }
}
