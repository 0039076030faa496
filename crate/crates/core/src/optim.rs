//! Adaptive-moment optimizer with per-parameter step counts.

use std::collections::BTreeMap;

use xlate_tensor::Tensor;

use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update per gradient entry. Returns the L2 norm of the
    /// total parameter change.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        let mut sq = 0.0;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, (&gi, pi)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let d = self.lr * mhat / (vhat.sqrt() + self.eps);
                *pi -= d;
                sq += d * d;
            }
        }
        sq.sqrt()
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Moments>) {
        self.state = state;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut opt = Adam::new(0.1, 0.0, 0.999, 1e-8);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]));
        opt.step(&mut ps, &g);
        let w = ps.get("w").data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.state()["w"].t, 1);
    }
}
