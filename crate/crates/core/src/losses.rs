//! Feature reconstruction and hinge adversarial objectives.

use serde::{Deserialize, Serialize};
use xlate_tensor::{Graph, Tensor, Var};

use crate::discriminator::{CritiqueVars, Discriminator, PatchCritique};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::probe::PerceptualProbe;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeId {
    PerceptualVgg19,
    Discriminator,
    Pooling,
}

/// A network whose hidden activations define a feature-space distance.
pub trait FeatureProbe {
    fn id(&self) -> ProbeId;
    /// Number of tap points `L`.
    fn taps(&self) -> usize;
    fn frozen(&self) -> bool;
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;
}

impl FeatureProbe for PerceptualProbe {
    fn id(&self) -> ProbeId {
        ProbeId::PerceptualVgg19
    }

    fn taps(&self) -> usize {
        crate::probe::PERCEPTUAL_TAPS
    }

    fn frozen(&self) -> bool {
        true
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(PerceptualProbe::taps(self, g, x))
    }
}

/// The discriminator's hidden layers over all scales.
pub struct DiscriminatorProbe<'a> {
    pub disc: &'a Discriminator,
    pub params: &'a ParamStore,
}

impl FeatureProbe for DiscriminatorProbe<'_> {
    fn id(&self) -> ProbeId {
        ProbeId::Discriminator
    }

    fn taps(&self) -> usize {
        self.disc.num_scales() * self.disc.layers_per_scale()
    }

    fn frozen(&self) -> bool {
        false
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(self.disc.forward(g, self.params, x)?.flat_features())
    }
}

/// Tap `i` is the input average-pooled `i` times; tap 0 is the identity.
pub struct PoolingProbe {
    pub taps: usize,
}

impl FeatureProbe for PoolingProbe {
    fn id(&self) -> ProbeId {
        ProbeId::Pooling
    }

    fn taps(&self) -> usize {
        self.taps
    }

    fn frozen(&self) -> bool {
        true
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = vec![x];
        for _ in 1..self.taps {
            let last = *out.last().unwrap();
            out.push(g.avg_pool2(last));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights(Vec<f64>);

impl LayerWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::WeightCount {
                taps: 0,
                weights: w.len(),
            });
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Sum over taps of `w_i * mean|P_i(pred) - P_i(target)|`. Target features
/// are detached.
pub fn feature_reconstruction_var(
    g: &mut Graph,
    pred: Var,
    target: Var,
    probe: &dyn FeatureProbe,
    weights: &LayerWeights,
) -> Result<Var> {
    if weights.len() != probe.taps() {
        return Err(Error::WeightCount {
            taps: probe.taps(),
            weights: weights.len(),
        });
    }
    let fp = probe.features(g, pred)?;
    let ft = probe.features(g, target)?;
    weighted_l1(g, &fp, &ft, weights)
}

/// Weighted per-layer mean-abs distance between precomputed feature lists;
/// the targets are detached.
pub fn weighted_l1(
    g: &mut Graph,
    pred: &[Var],
    target: &[Var],
    weights: &LayerWeights,
) -> Result<Var> {
    if pred.len() != weights.len() || target.len() != weights.len() {
        return Err(Error::WeightCount {
            taps: pred.len(),
            weights: weights.len(),
        });
    }
    let mut total: Option<Var> = None;
    for ((&p, &t), &w) in pred.iter().zip(target).zip(weights.values()) {
        let t = g.detach(t);
        let d = g.mean_abs_diff(p, t);
        let d = g.scale(d, w);
        total = Some(match total {
            Some(acc) => g.add(acc, d),
            None => d,
        });
    }
    Ok(total.expect("at least one tap"))
}

pub fn feature_reconstruction_loss(
    pred: &Tensor,
    target: &Tensor,
    probe: &dyn FeatureProbe,
    weights: &LayerWeights,
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "reconstruction target",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let mut g = Graph::inference();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = feature_reconstruction_var(&mut g, p, t, probe, weights)?;
    Ok(g.value(l).item())
}

fn check_structure(g: &Graph, real: &[Var], fake: &[Var]) -> Result<()> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape("critique scales", real.len(), fake.len()));
    }
    for (r, f) in real.iter().zip(fake) {
        if g.value(*r).shape() != g.value(*f).shape() {
            return Err(Error::shape(
                "critique logits",
                format!("{:?}", g.value(*r).shape()),
                format!("{:?}", g.value(*f).shape()),
            ));
        }
    }
    Ok(())
}

/// Minimized hinge objective of the critic: per scale
/// `mean relu(1 - real) + mean relu(1 + fake)`, averaged over scales.
pub fn hinge_d_var(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    check_structure(g, real, fake)?;
    let mut terms = Vec::new();
    for (&r, &f) in real.iter().zip(fake) {
        let nr = g.neg(r);
        let a = g.add_scalar(nr, 1.0);
        let a = g.relu(a);
        let a = g.mean(a);
        let b = g.add_scalar(f, 1.0);
        let b = g.relu(b);
        let b = g.mean(b);
        terms.push(g.add(a, b));
    }
    Ok(average(g, &terms))
}

/// `-mean(fake)`, averaged over scales.
pub fn hinge_g_var(g: &mut Graph, fake: &[Var]) -> Var {
    let terms: Vec<Var> = fake.iter().map(|&f| g.mean(f)).collect();
    let m = average(g, &terms);
    g.neg(m)
}

fn average(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

pub fn hinge_d_loss(real: &PatchCritique, fake: &PatchCritique) -> Result<f64> {
    let mut g = Graph::inference();
    let r: Vec<Var> = real.logits.iter().map(|t| g.constant(t.clone())).collect();
    let f: Vec<Var> = fake.logits.iter().map(|t| g.constant(t.clone())).collect();
    let l = hinge_d_var(&mut g, &r, &f)?;
    Ok(g.value(l).item())
}

pub fn hinge_g_loss(fake: &PatchCritique) -> Result<f64> {
    if fake.logits.is_empty() {
        return Err(Error::shape("critique scales", "at least 1", 0));
    }
    let mut g = Graph::inference();
    let f: Vec<Var> = fake.logits.iter().map(|t| g.constant(t.clone())).collect();
    let l = hinge_g_var(&mut g, &f);
    Ok(g.value(l).item())
}

/// Loss multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub vgg: f64,
    pub feat: f64,
    pub adv: f64,
    pub kl: f64,
}

impl From<&crate::config::LossConfig> for Lambdas {
    fn from(c: &crate::config::LossConfig) -> Self {
        Self {
            vgg: c.lambda_vgg,
            feat: c.lambda_feat,
            adv: c.lambda_adv,
            kl: c.lambda_kl,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_perceptual: f64,
    pub recon_disc_features: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub kl: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// Weighted generator total from the named terms.
    pub fn recompute_total_g(&self, l: &Lambdas) -> f64 {
        l.vgg * self.recon_perceptual
            + l.feat * self.recon_disc_features
            + l.adv * self.adv_g
            + l.kl * self.kl
    }

    pub fn all_finite(&self) -> bool {
        [
            self.recon_perceptual,
            self.recon_disc_features,
            self.adv_g,
            self.adv_d,
            self.kl,
            self.total_g,
            self.total_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Generator-side graph terms for one within-domain reconstruction.
pub struct GeneratorTerms {
    pub perceptual: Var,
    pub disc_features: Var,
    pub adv: Var,
    pub total: Var,
}

/// Builds the generator objective on `g`: `fake` is the reconstruction of
/// `real`, the critic's parameters are read from `params` and its features
/// of the real image are detached.
#[allow(clippy::too_many_arguments)]
pub fn generator_terms(
    g: &mut Graph,
    real: Var,
    fake: Var,
    disc: &Discriminator,
    params: &ParamStore,
    perceptual: &PerceptualProbe,
    perceptual_weights: &LayerWeights,
    lambdas: &Lambdas,
    kl: Option<Var>,
    cond: Option<Var>,
) -> Result<GeneratorTerms> {
    let perc = feature_reconstruction_var(g, fake, real, perceptual, perceptual_weights)?;
    let (real_in, fake_in) = critic_inputs(g, real, fake, cond);
    let cr = disc.forward(g, params, real_in)?;
    let cf = disc.forward(g, params, fake_in)?;
    let n = disc.num_scales() * disc.layers_per_scale();
    let fw = LayerWeights::uniform(n, 1.0 / disc.num_scales() as f64);
    let feat = weighted_l1(g, &cf.flat_features(), &cr.flat_features(), &fw)?;
    let adv = hinge_g_var(g, &cf.logits);
    let a = g.scale(perc, lambdas.vgg);
    let b = g.scale(feat, lambdas.feat);
    let c = g.scale(adv, lambdas.adv);
    let mut total = g.add(a, b);
    total = g.add(total, c);
    if let Some(kl) = kl {
        let k = g.scale(kl, lambdas.kl);
        total = g.add(total, k);
    }
    Ok(GeneratorTerms {
        perceptual: perc,
        disc_features: feat,
        adv,
        total,
    })
}

/// Critic inputs, with conditioning channels appended for a conditional
/// critic.
pub fn critic_inputs(g: &mut Graph, real: Var, fake: Var, cond: Option<Var>) -> (Var, Var) {
    match cond {
        Some(c) => (g.concat_channels(&[real, c]), g.concat_channels(&[fake, c])),
        None => (real, fake),
    }
}

/// The critic's objective on a real image and a detached fake.
pub fn discriminator_terms(
    g: &mut Graph,
    real: Var,
    fake: Var,
    disc: &Discriminator,
    params: &ParamStore,
    cond: Option<Var>,
) -> Result<(Var, CritiqueVars, CritiqueVars)> {
    let fake = g.detach(fake);
    let (real_in, fake_in) = critic_inputs(g, real, fake, cond);
    let cr = disc.forward(g, params, real_in)?;
    let cf = disc.forward(g, params, fake_in)?;
    let l = hinge_d_var(g, &cr.logits, &cf.logits)?;
    Ok((l, cr, cf))
}
