//! Multi-scale patch discriminators.

use rand::Rng;
use xlate_tensor::{Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, ParamStore, LEAK};

/// Logits and hidden features per scale, finest scale first.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCritique {
    pub logits: Vec<Tensor>,
    /// Per scale, layer outputs ordered shallow to deep.
    pub features: Vec<Vec<Tensor>>,
}

impl PatchCritique {
    pub fn scales(&self) -> usize {
        self.logits.len()
    }

    /// Critique made of constant logit maps, for tests and oracles.
    pub fn constant(shapes: &[&[usize]], value: f64) -> Self {
        Self {
            logits: shapes.iter().map(|s| Tensor::full(s, value)).collect(),
            features: vec![Vec::new(); shapes.len()],
        }
    }
}

/// A critique on a tape.
#[derive(Clone, Debug)]
pub struct CritiqueVars {
    pub logits: Vec<Var>,
    pub features: Vec<Vec<Var>>,
}

impl CritiqueVars {
    pub fn to_critique(&self, g: &Graph) -> PatchCritique {
        PatchCritique {
            logits: self.logits.iter().map(|v| g.value(*v).clone()).collect(),
            features: self
                .features
                .iter()
                .map(|f| f.iter().map(|v| g.value(*v).clone()).collect())
                .collect(),
        }
    }

    /// All hidden features, scale-major, each scale shallow to deep.
    pub fn flat_features(&self) -> Vec<Var> {
        self.features.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    prefix: String,
    resolution: usize,
    in_channels: usize,
    scales: Vec<(Vec<Conv>, Conv)>,
}

impl Discriminator {
    /// Parameters are named `disc.<key>.*`. `extra_channels` is nonzero for
    /// a conditional critic that also sees the conditioning stack.
    pub fn new(cfg: &ModelConfig, resolution: usize, key: &str, extra_channels: usize) -> Self {
        let prefix = format!("disc.{key}");
        let in_channels = 3 + extra_channels;
        let scales = (0..cfg.disc_scales)
            .map(|s| {
                let mut cin = in_channels;
                let layers: Vec<Conv> = (0..cfg.disc_layers)
                    .map(|l| {
                        let cout = cfg.disc_width(l);
                        let c = Conv::same(format!("{prefix}.s{s}.l{l}"), cin, cout)
                            .strided(4, 2, 1)
                            .spectral();
                        cin = cout;
                        c
                    })
                    .collect();
                let out = Conv::same(format!("{prefix}.s{s}.out"), cin, 1).spectral();
                (layers, out)
            })
            .collect();
        Self {
            prefix,
            resolution,
            in_channels,
            scales,
        }
    }

    pub fn prefix(&self) -> String {
        format!("{}.", self.prefix)
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn layers_per_scale(&self) -> usize {
        self.scales[0].0.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.scales
            .iter()
            .flat_map(|(l, o)| l.iter().chain(std::iter::once(o)))
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R) {
        for c in self.convs() {
            c.init(ps, rng, 1.0);
        }
    }

    /// One power-iteration step on every spectrally normalized weight.
    pub fn power_iterate(&self, ps: &mut ParamStore) {
        for c in self.convs() {
            c.power_iterate(ps);
        }
    }

    /// Logit map extent per scale at the configured resolution.
    pub fn logit_extents(&self) -> Vec<usize> {
        (0..self.scales.len())
            .map(|s| {
                let mut r = self.resolution >> s;
                for c in &self.scales[s].0 {
                    r = (r + 2 * c.pad - c.k) / c.stride + 1;
                }
                r
            })
            .collect()
    }

    /// Receptive field (in pixels of that scale's input) and the stride and
    /// offset mapping logit index `o` to the window start `o * jump - offset`.
    pub fn receptive_field(&self, scale: usize) -> (usize, usize, usize) {
        let (layers, out) = &self.scales[scale];
        let (mut rf, mut jump, mut offset) = (1, 1, 0);
        for c in layers.iter().chain(std::iter::once(out)) {
            rf += (c.k - 1) * jump;
            offset += c.pad * jump;
            jump *= c.stride;
        }
        (rf, jump, offset)
    }

    /// `x` is `[N, C, R, R]` (image, plus conditioning if conditional).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<CritiqueVars> {
        let (_, c, h, w) = g.value(x).dims4();
        if (c, h, w) != (self.in_channels, self.resolution, self.resolution) {
            return Err(Error::shape(
                "discriminator input",
                format!("{}x{1}x{1}", self.in_channels, self.resolution),
                format!("{c}x{h}x{w}"),
            ));
        }
        let mut input = x;
        let mut logits = Vec::new();
        let mut features = Vec::new();
        for (s, (layers, out)) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input);
            }
            let mut h = input;
            let mut feats = Vec::new();
            for l in layers {
                h = l.forward(g, ps, h);
                h = g.leaky_relu(h, LEAK);
                feats.push(h);
            }
            logits.push(out.forward(g, ps, h));
            features.push(feats);
        }
        Ok(CritiqueVars { logits, features })
    }

    pub fn critique(&self, ps: &ParamStore, input: &Tensor) -> Result<PatchCritique> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        Ok(self.forward(&mut g, ps, x)?.to_critique(&g))
    }
}
