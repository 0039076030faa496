use std::fmt;

use serde::{Deserialize, Serialize};
use xlate_tensor::Tensor;

use crate::error::{Error, Result};

/// Name of an image domain (e.g. a dataset split such as `male` / `female`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(String);

impl DomainId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// An RGB image in `[-1, 1]`, stored planar as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Tensor,
    domain: DomainId,
}

impl ImageTensor {
    pub fn new(pixels: Tensor, domain: DomainId) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::shape("image", "[3, R, R]", format!("{shape:?}")));
        }
        if let Some(i) = pixels.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "image".into(),
                pixel: i,
            });
        }
        if pixels.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::shape("image range", "[-1, 1]", "values outside"));
        }
        Ok(Self { pixels, domain })
    }

    /// Builds an image from interleaved 8-bit RGB.
    pub fn from_rgb8(rgb: &[u8], resolution: usize, domain: DomainId) -> Result<Self> {
        if rgb.len() != resolution * resolution * 3 {
            return Err(Error::shape(
                "rgb buffer",
                resolution * resolution * 3,
                rgb.len(),
            ));
        }
        let hw = resolution * resolution;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in rgb.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Self::new(Tensor::new(&[3, resolution, resolution], data), domain)
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let r = self.resolution();
        let hw = r * r;
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                out.push(((d[c * hw + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn domain(&self) -> &DomainId {
        &self.domain
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn with_domain(mut self, domain: DomainId) -> Self {
        self.domain = domain;
        self
    }

    /// Stacks images into an `[N, 3, R, R]` batch.
    pub fn batch(images: &[&ImageTensor]) -> Tensor {
        let r = images[0].resolution();
        let parts: Vec<Tensor> = images
            .iter()
            .map(|im| im.pixels.clone().reshape(&[1, 3, r, r]))
            .collect();
        Tensor::stack_outer(&parts)
    }

    /// Splits an `[N, 3, R, R]` batch, clamping into range.
    pub fn unbatch(batch: &Tensor, domain: &DomainId) -> Vec<ImageTensor> {
        let (n, _, h, w) = batch.dims4();
        (0..n)
            .map(|i| {
                let t = batch
                    .slice_outer(i, 1)
                    .reshape(&[3, h, w])
                    .map(|v| v.clamp(-1.0, 1.0));
                ImageTensor {
                    pixels: t,
                    domain: domain.clone(),
                }
            })
            .collect()
    }

    pub fn load_png(path: &std::path::Path, resolution: usize, domain: DomainId) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        if img.width() as usize != resolution || img.height() as usize != resolution {
            return Err(Error::shape(
                &format!("image {}", path.display()),
                format!("{resolution}x{resolution}"),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
        Self::from_rgb8(img.as_raw(), resolution, domain)
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let r = self.resolution() as u32;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        image::RgbImage::from_raw(r, r, self.to_rgb8())
            .expect("buffer sized from resolution")
            .save(path)?;
        Ok(())
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_error(&self, other: &ImageTensor) -> f64 {
        self.pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.len() as f64
    }
}
