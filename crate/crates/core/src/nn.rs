//! Parameter storage and the two layer types the networks are built from.

use std::collections::BTreeMap;

use rand::Rng;
use xlate_tensor::{Graph, Tensor, Var};

/// Slope of every leaky rectifier in the model.
pub const LEAK: f64 = 0.2;

/// Variance floor of parameter-free normalization.
pub const NORM_EPS: f64 = 1e-7;

/// Trainable tensors plus non-trainable buffers (spectral-norm vectors).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never initialized"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("buffer `{name}` was never initialized"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn names_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Total scalar count of parameters under `prefix`.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + LEAK * LEAK) / fan_in as f64).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl Conv {
    /// Same-padded 3x3, stride 1, with bias.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k: 3,
            stride: 1,
            pad: 1,
            bias: true,
            spectral: false,
        }
    }

    pub fn strided(mut self, k: usize, stride: usize, pad: usize) -> Self {
        self.k = k;
        self.stride = stride;
        self.pad = pad;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-normal weights multiplied by `gain`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R, gain: f64) {
        let fan_in = self.cin * self.k * self.k;
        ps.insert(
            self.weight_name(),
            Tensor::randn(
                &[self.cout, self.cin, self.k, self.k],
                gain * he_std(fan_in),
                rng,
            ),
        );
        if self.bias {
            ps.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
        }
        if self.spectral {
            let mut u = Tensor::randn(&[self.cout], 1.0, rng);
            normalize(u.data_mut());
            ps.insert_buffer(format!("{}.sn_u", self.name), u);
            let mut v = Tensor::randn(&[fan_in], 1.0, rng);
            normalize(v.data_mut());
            ps.insert_buffer(format!("{}.sn_v", self.name), v);
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let mut w = g.param(&self.weight_name(), ps.get(&self.weight_name()));
        if self.spectral {
            let u = ps.buffer(&format!("{}.sn_u", self.name));
            let v = ps.buffer(&format!("{}.sn_v", self.name));
            w = g.spectral_norm(w, u.data(), v.data());
        }
        let b = self
            .bias
            .then(|| g.param(&self.bias_name(), ps.get(&self.bias_name())));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// One power-iteration step refreshing the spectral-norm vectors.
    pub fn power_iterate(&self, ps: &mut ParamStore) {
        if !self.spectral {
            return;
        }
        let w = ps.get(&self.weight_name()).clone();
        let rows = self.cout;
        let cols = w.len() / rows;
        let u_name = format!("{}.sn_u", self.name);
        let v_name = format!("{}.sn_v", self.name);
        let u = ps.buffer(&u_name).data().to_vec();
        let mut v = vec![0.0; cols];
        for (r, &ur) in u.iter().enumerate() {
            for (vc, &wv) in v.iter_mut().zip(&w.data()[r * cols..(r + 1) * cols]) {
                *vc += wv * ur;
            }
        }
        normalize(&mut v);
        let mut nu: Vec<f64> = (0..rows)
            .map(|r| {
                w.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        normalize(&mut nu);
        ps.buffer_mut(&u_name)
            .unwrap()
            .data_mut()
            .copy_from_slice(&nu);
        ps.buffer_mut(&v_name)
            .unwrap()
            .data_mut()
            .copy_from_slice(&v);
    }
}

/// Fully-connected layer on `[N, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R, gain: f64) {
        ps.insert(
            format!("{}.weight", self.name),
            Tensor::randn(&[self.dout, self.din], gain * he_std(self.din), rng),
        );
        ps.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let wn = format!("{}.weight", self.name);
        let bn = format!("{}.bias", self.name);
        let w = g.param(&wn, ps.get(&wn));
        let b = g.param(&bn, ps.get(&bn));
        g.linear(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn power_iteration_converges_to_top_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv::same("c", 2, 3).spectral();
        let mut ps = ParamStore::new();
        conv.init(&mut ps, &mut rng, 1.0);
        for _ in 0..200 {
            conv.power_iterate(&mut ps);
        }
        // sigma of W / sigma must be 1: check ||W_sn v|| = 1 for the top v
        let mut g = Graph::inference();
        let w = g.param("c.weight", ps.get("c.weight"));
        let sn = g.spectral_norm(w, ps.buffer("c.sn_u").data(), ps.buffer("c.sn_v").data());
        let m = g.value(sn);
        let v = ps.buffer("c.sn_v").data();
        let cols = v.len();
        let norm: f64 = (0..3)
            .map(|r| {
                let s: f64 = m.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum();
                s * s
            })
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "{norm}");
    }
}
