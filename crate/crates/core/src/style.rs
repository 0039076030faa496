//! Style encoders: RGB image to a global vector with no spatial extent.

use rand::Rng;
use xlate_tensor::{Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::discriminator::Discriminator;
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, ParamStore, LEAK};

#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    values: Tensor,
}

impl StyleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "style vector".into(),
                pixel: i,
            });
        }
        let n = values.len();
        Ok(Self {
            values: Tensor::new(&[n], values),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Always `[S]`: a style vector has no spatial axes.
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    /// Rows of a `[N, S]` tensor.
    pub fn unbatch(t: &Tensor) -> Vec<StyleVector> {
        let (n, s) = t.dims2();
        (0..n)
            .map(|i| Self {
                values: Tensor::new(&[s], t.data()[i * s..(i + 1) * s].to_vec()),
            })
            .collect()
    }

    pub fn batch(styles: &[&StyleVector]) -> Tensor {
        let s = styles[0].dim();
        let data = styles
            .iter()
            .flat_map(|v| v.values().iter().copied())
            .collect();
        Tensor::new(&[styles.len(), s], data)
    }
}

/// Unnormalized residual block followed by 2x average pooling.
#[derive(Clone, Debug)]
struct DownBlock {
    a: Conv,
    b: Conv,
    skip: Option<Conv>,
}

impl DownBlock {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = g.leaky_relu(x, LEAK);
        let h = self.a.forward(g, ps, h);
        let h = g.leaky_relu(h, LEAK);
        let h = self.b.forward(g, ps, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x),
            None => x,
        };
        let y = g.add(s, h);
        g.avg_pool2(y)
    }
}

/// Output of a style forward pass on a tape.
pub struct StyleVars {
    /// `[N, S]`.
    pub z: Var,
    /// Mean KL divergence to the unit Gaussian (variational encoders only).
    pub kl: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    prefix: String,
    resolution: usize,
    dim: usize,
    stem: Conv,
    blocks: Vec<DownBlock>,
    head: Dense,
    logvar: Option<Dense>,
}

impl StyleEncoder {
    /// Parameters are named `style.<key>.*`.
    pub fn new(cfg: &ModelConfig, resolution: usize, key: &str, variational: bool) -> Self {
        let prefix = format!("style.{key}");
        let stem = Conv::same(format!("{prefix}.stem"), 3, cfg.style_width(resolution));
        let mut blocks = Vec::new();
        let mut r = resolution;
        while r > 8 {
            let (cin, cout) = (cfg.style_width(r), cfg.style_width(r / 2));
            let name = format!("{prefix}.block{r}");
            blocks.push(DownBlock {
                a: Conv::same(format!("{name}.a"), cin, cout),
                b: Conv::same(format!("{name}.b"), cout, cout),
                skip: (cin != cout).then(|| {
                    Conv::same(format!("{name}.skip"), cin, cout)
                        .strided(1, 1, 0)
                        .no_bias()
                }),
            });
            r /= 2;
        }
        let width = cfg.style_width(8);
        let head_name = if variational { "mu" } else { "fc" };
        Self {
            head: Dense::new(format!("{prefix}.{head_name}"), width, cfg.style_dim),
            logvar: variational
                .then(|| Dense::new(format!("{prefix}.logvar"), width, cfg.style_dim)),
            prefix,
            resolution,
            dim: cfg.style_dim,
            stem,
            blocks,
        }
    }

    pub fn prefix(&self) -> String {
        format!("{}.", self.prefix)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_variational(&self) -> bool {
        self.logvar.is_some()
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R) {
        self.stem.init(ps, rng, 1.0);
        for b in &self.blocks {
            b.a.init(ps, rng, 1.0);
            b.b.init(ps, rng, 0.5);
            if let Some(s) = &b.skip {
                s.init(ps, rng, 1.0);
            }
        }
        self.head.init(ps, rng, 1.0);
        if let Some(l) = &self.logvar {
            l.init(ps, rng, 0.1);
        }
    }

    /// `x` is `[N, 3, R, R]`. With `noise` (`[N, S]` standard normal) a
    /// variational encoder samples by reparameterization; without it the
    /// mean is returned.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        noise: Option<&Tensor>,
    ) -> Result<StyleVars> {
        let (_, c, h, w) = g.value(x).dims4();
        if (c, h, w) != (3, self.resolution, self.resolution) {
            return Err(Error::shape(
                "style encoder input",
                format!("3x{0}x{0}", self.resolution),
                format!("{c}x{h}x{w}"),
            ));
        }
        let mut h = self.stem.forward(g, ps, x);
        for b in &self.blocks {
            h = b.forward(g, ps, h);
        }
        let h = g.global_avg_pool(h);
        let h = g.leaky_relu(h, LEAK);
        let mu = self.head.forward(g, ps, h);
        let Some(lv) = &self.logvar else {
            return Ok(StyleVars { z: mu, kl: None });
        };
        let logvar = lv.forward(g, ps, h);
        // kl = -0.5 * mean(1 + logvar - mu^2 - exp(logvar))
        let var = g.exp(logvar);
        let mu2 = g.mul(mu, mu);
        let t = g.sub(logvar, mu2);
        let t = g.sub(t, var);
        let t = g.add_scalar(t, 1.0);
        let t = g.mean(t);
        let kl = g.scale(t, -0.5 * self.dim as f64);
        let z = match noise {
            Some(eps) => {
                let e = g.constant(eps.clone());
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let s = g.mul(std, e);
                g.add(mu, s)
            }
            None => mu,
        };
        Ok(StyleVars { z, kl: Some(kl) })
    }

    /// Evaluation-mode style of one image.
    pub fn encode(&self, ps: &ParamStore, image: &ImageTensor) -> Result<StyleVector> {
        Ok(self.encode_batch(ps, &[image])?.remove(0))
    }

    pub fn encode_batch(
        &self,
        ps: &ParamStore,
        images: &[&ImageTensor],
    ) -> Result<Vec<StyleVector>> {
        let mut g = Graph::inference();
        let x = g.constant(ImageTensor::batch(images));
        let out = self.forward(&mut g, ps, x, None)?;
        Ok(StyleVector::unbatch(g.value(out.z)))
    }
}

/// Per-domain trainable state. `style_key` and `disc_key` name the
/// parameter groups; domains that share an encoder share its key.
#[derive(Clone, Debug)]
pub struct DomainBundle {
    pub domain: DomainId,
    pub style_key: String,
    pub disc_key: String,
    pub style: StyleEncoder,
    pub disc: Discriminator,
}

impl DomainBundle {
    pub fn style_prefix(&self) -> String {
        format!("style.{}.", self.style_key)
    }

    pub fn disc_prefix(&self) -> String {
        format!("disc.{}.", self.disc_key)
    }
}

pub(crate) fn check_domain_name(d: &DomainId) -> Result<()> {
    let ok = !d.as_str().is_empty()
        && d.as_str()
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok && d.as_str() != "shared" {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "domain name `{d}` must be non-empty ASCII letters, digits, `_` or `-` and not `shared`"
        )))
    }
}
