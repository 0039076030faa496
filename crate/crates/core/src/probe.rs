//! Frozen random convolutional probe used for perceptual losses and FID
//! features when no pretrained network is available.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlate_tensor::{Graph, Tensor, Var};

use crate::nn::{Conv, ParamStore, LEAK};

pub const PERCEPTUAL_TAPS: usize = 5;
pub const PROBE_SEED: u64 = 0x5EED_CAFE;
pub const PROBE_ID: &str = "random-conv-f64";

const WIDTHS: [usize; PERCEPTUAL_TAPS] = [16, 32, 32, 64, 64];
const STRIDES: [usize; PERCEPTUAL_TAPS] = [1, 2, 1, 2, 1];

#[derive(Clone, Debug)]
pub struct PerceptualProbe {
    convs: Vec<Conv>,
    params: ParamStore,
}

impl Default for PerceptualProbe {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualProbe {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let convs = WIDTHS
            .iter()
            .zip(STRIDES)
            .enumerate()
            .map(|(i, (&w, s))| {
                let c = Conv::same(format!("probe.{i}"), cin, w).strided(3, s, 1);
                c.init(&mut params, &mut rng, 1.0);
                cin = w;
                c
            })
            .collect();
        Self { convs, params }
    }

    /// Width of the pooled FID feature vector.
    pub fn feature_dim(&self) -> usize {
        WIDTHS[PERCEPTUAL_TAPS - 1]
    }

    /// Tap activations, shallow to deep. Weights enter the tape as
    /// constants, so no gradient ever reaches them.
    pub fn taps(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let w = g.constant(self.params.get(&c.weight_name()).clone());
            let b = g.constant(self.params.get(&c.bias_name()).clone());
            h = g.conv2d(h, w, Some(b), c.stride, c.pad);
            h = g.leaky_relu(h, LEAK);
            out.push(h);
        }
        out
    }

    /// Globally pooled deepest tap, `[N, F]`.
    pub fn pooled_features(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let last = *self.taps(&mut g, x).last().expect("probe has taps");
        let p = g.global_avg_pool(last);
        g.value(p).clone()
    }
}
