//! Assembly of encoders, generator and per-domain bundles for a variant.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use xlate_tensor::{Graph, Tensor, Var};

use crate::conditioning::{ConditioningStack, Manifest};
use crate::config::{RunConfig, Variant};
use crate::content::ContentEncoder;
use crate::discriminator::{Discriminator, PatchCritique};
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::generator::{ContentCode, ContentVars, DenormParams, Generator};
use crate::nn::ParamStore;
use crate::probe::PerceptualProbe;
use crate::style::{check_domain_name, DomainBundle, StyleEncoder, StyleVars, StyleVector};
use crate::trace::{CallTrace, TraceEvent};

pub const SHARED_KEY: &str = "shared";

/// Seed for one component, independent of construction order.
pub fn component_seed(seed: u64, component: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(component.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

fn rng_for(seed: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(component_seed(seed, component))
}

#[derive(Clone, Debug)]
pub struct TranslationModel {
    config: RunConfig,
    manifest: Manifest,
    pub params: ParamStore,
    content: Option<ContentEncoder>,
    generator: Generator,
    bundles: BTreeMap<DomainId, DomainBundle>,
    probe: PerceptualProbe,
    trace: Option<CallTrace>,
}

/// Generator output on a training tape.
pub struct ForwardVars {
    pub fake: Var,
    pub kl: Option<Var>,
    pub cond: Var,
}

impl TranslationModel {
    /// Builds and initializes every component, registering the configured
    /// domains.
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest()?;
        let r = config.resolution;
        let d = manifest.total_channels();
        let m = &config.model;
        let content = config
            .variant
            .has_content_encoder()
            .then(|| ContentEncoder::new(m, r, d));
        let widths = content
            .as_ref()
            .map(|c| (c.level_width(8), c.level_width(32)))
            .unwrap_or((0, 0));
        let generator = Generator::new(m, config.variant, r, d, widths);
        let mut params = ParamStore::new();
        if let Some(c) = &content {
            c.init(&mut params, &mut rng_for(config.seed, "content"));
        }
        generator.init(&mut params, &mut rng_for(config.seed, "gen"));
        let mut model = Self {
            config: config.clone(),
            manifest,
            params,
            content,
            generator,
            bundles: BTreeMap::new(),
            probe: PerceptualProbe::new(),
            trace: None,
        };
        for domain in config.domains.clone() {
            model.register_domain(domain)?;
        }
        Ok(model)
    }

    /// Adds a domain. Variant E gets fresh, independently initialized style
    /// and discriminator parameters; the other variants alias the shared
    /// ones.
    pub fn register_domain(&mut self, domain: DomainId) -> Result<&DomainBundle> {
        check_domain_name(&domain)?;
        if self.bundles.contains_key(&domain) {
            return Err(Error::DuplicateDomain(domain));
        }
        let v = self.config.variant;
        let key = if v.per_domain_bundles() {
            domain.as_str().to_string()
        } else {
            SHARED_KEY.to_string()
        };
        let m = &self.config.model;
        let r = self.config.resolution;
        let style = StyleEncoder::new(m, r, &key, v.variational_style());
        let extra = if m.conditional_discriminator {
            self.manifest.total_channels()
        } else {
            0
        };
        let disc = Discriminator::new(m, r, &key, extra);
        let style_prefix = style.prefix();
        if self
            .params
            .names_with_prefix(&style_prefix)
            .next()
            .is_none()
        {
            style.init(
                &mut self.params,
                &mut rng_for(self.config.seed, &style_prefix),
            );
        }
        let disc_prefix = disc.prefix();
        if self.params.names_with_prefix(&disc_prefix).next().is_none() {
            disc.init(
                &mut self.params,
                &mut rng_for(self.config.seed, &disc_prefix),
            );
        }
        if !self.config.domains.contains(&domain) {
            self.config.domains.push(domain.clone());
        }
        let bundle = DomainBundle {
            domain: domain.clone(),
            style_key: key.clone(),
            disc_key: key,
            style,
            disc,
        };
        Ok(self.bundles.entry(domain).or_insert(bundle))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Changes the step budget, which is not part of the structure.
    pub fn set_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn content_encoder(&self) -> Option<&ContentEncoder> {
        self.content.as_ref()
    }

    pub fn probe(&self) -> &PerceptualProbe {
        &self.probe
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.bundles.keys().cloned().collect()
    }

    pub fn bundles(&self) -> impl Iterator<Item = &DomainBundle> {
        self.bundles.values()
    }

    pub fn bundle(&self, domain: &DomainId) -> Result<&DomainBundle> {
        self.bundles
            .get(domain)
            .ok_or_else(|| Error::UnknownDomain(domain.clone()))
    }

    pub fn set_trace(&mut self, trace: Option<CallTrace>) {
        self.trace = trace;
    }

    pub fn trace(&self) -> Option<&CallTrace> {
        self.trace.as_ref()
    }

    pub(crate) fn record(&self, e: TraceEvent) {
        if let Some(t) = &self.trace {
            t.record(e);
        }
    }

    /// Distinct style encoders.
    pub fn style_encoder_count(&self) -> usize {
        let mut keys: Vec<&str> = self
            .bundles
            .values()
            .map(|b| b.style_key.as_str())
            .collect();
        keys.sort();
        keys.dedup();
        keys.len()
    }

    pub fn discriminator_count(&self) -> usize {
        let mut keys: Vec<&str> = self.bundles.values().map(|b| b.disc_key.as_str()).collect();
        keys.sort();
        keys.dedup();
        keys.len()
    }

    /// Prefixes updated by the generator-side step for `domain`.
    pub fn generator_prefixes(&self, domain: &DomainId) -> Result<Vec<String>> {
        let b = self.bundle(domain)?;
        Ok(vec!["content.".into(), "gen.".into(), b.style_prefix()])
    }

    fn check_stack(&self, cond: &ConditioningStack) -> Result<()> {
        if cond.manifest() != &self.manifest {
            return Err(Error::VariantManifest {
                variant: self.variant().to_string(),
                reason: "conditioning manifest differs from the run manifest".into(),
            });
        }
        if cond.resolution() != self.resolution() {
            return Err(Error::shape(
                "conditioning",
                self.resolution(),
                cond.resolution(),
            ));
        }
        Ok(())
    }

    fn content_vars(&self, g: &mut Graph, cond: Var) -> Result<ContentVars> {
        Ok(match &self.content {
            Some(enc) => ContentVars::Pyramid(enc.forward(g, &self.params, cond)?),
            None => ContentVars::Raw(cond),
        })
    }

    pub fn encode_content_batch(&self, conds: &[&ConditioningStack]) -> Result<ContentCode> {
        for c in conds {
            self.check_stack(c)?;
        }
        Ok(match &self.content {
            Some(enc) => ContentCode::Pyramid(enc.encode_batch(&self.params, conds)?),
            None => ContentCode::Raw(ConditioningStack::batch(conds)),
        })
    }

    pub fn encode_content(&self, cond: &ConditioningStack) -> Result<ContentCode> {
        self.encode_content_batch(&[cond])
    }

    /// Style of images through `domain`'s encoder, in evaluation mode.
    pub fn encode_style_batch(
        &self,
        images: &[&ImageTensor],
        domain: &DomainId,
    ) -> Result<Vec<StyleVector>> {
        let b = self.bundle(domain)?;
        for img in images {
            if img.resolution() != self.resolution() {
                return Err(Error::shape(
                    "style image",
                    self.resolution(),
                    img.resolution(),
                ));
            }
            self.record(TraceEvent::StyleEncoded {
                key: b.style_key.clone(),
                image_domain: img.domain().clone(),
            });
        }
        b.style.encode_batch(&self.params, images)
    }

    pub fn encode_style(&self, image: &ImageTensor, domain: &DomainId) -> Result<StyleVector> {
        Ok(self.encode_style_batch(&[image], domain)?.remove(0))
    }

    pub fn synthesize_batch(
        &self,
        content: &ContentCode,
        styles: &[&StyleVector],
        domain: &DomainId,
        dump: Option<&mut Vec<DenormParams>>,
    ) -> Result<Vec<ImageTensor>> {
        self.generator
            .synthesize_batch(&self.params, content, styles, domain, dump)
    }

    pub fn synthesize(
        &self,
        content: &ContentCode,
        style: &StyleVector,
        domain: &DomainId,
    ) -> Result<ImageTensor> {
        self.generator
            .synthesize(&self.params, content, style, domain)
    }

    /// Critic input for a batch: images, plus conditioning when the critic
    /// is conditional.
    pub fn critic_input(&self, images: &Tensor, cond: Option<&Tensor>) -> Tensor {
        match cond {
            Some(c) if self.config.model.conditional_discriminator => {
                let mut g = Graph::inference();
                let a = g.constant(images.clone());
                let b = g.constant(c.clone());
                let x = g.concat_channels(&[a, b]);
                g.value(x).clone()
            }
            _ => images.clone(),
        }
    }

    pub fn discriminate(
        &self,
        image: &ImageTensor,
        cond: Option<&ConditioningStack>,
    ) -> Result<PatchCritique> {
        let b = self.bundle(image.domain())?;
        let c = cond.map(|c| {
            c.to_tensor()
                .reshape(&[1, c.channels(), c.resolution(), c.resolution()])
        });
        let x = self.critic_input(&ImageTensor::batch(&[image]), c.as_ref());
        b.disc.critique(&self.params, &x)
    }

    /// Within-domain reconstruction on a tape: content from `cond`, style
    /// from `images` through `domain`'s encoder. `noise` drives variational
    /// sampling.
    pub fn forward_reconstruction(
        &self,
        g: &mut Graph,
        images: Var,
        cond: &Tensor,
        domain: &DomainId,
        noise: Option<&Tensor>,
    ) -> Result<ForwardVars> {
        let b = self.bundle(domain)?;
        let cond = g.constant(cond.clone());
        let content = self.content_vars(g, cond)?;
        let StyleVars { z, kl } = b.style.forward(g, &self.params, images, noise)?;
        let fake = self.generator.forward(g, &self.params, &content, z, None)?;
        Ok(ForwardVars { fake, kl, cond })
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.params.scalar_count(prefix)
    }

    /// Parameter names, excluding the discriminators.
    pub fn generator_param_names(&self) -> Vec<String> {
        self.params
            .params()
            .keys()
            .filter(|k| !k.starts_with("disc."))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ModalityKind, ModalitySpec};
    use std::collections::BTreeSet;

    fn config(variant: Variant) -> RunConfig {
        let m = Manifest::new(vec![
            ModalitySpec::keypoints(ModalityKind::Keypoints, 3, 2.0),
            ModalitySpec::segmentation(ModalityKind::DenseposeParts, 3),
        ])
        .unwrap();
        let mut c = RunConfig::new(32, variant, &["a", "b"], &m);
        c.model.width_mult = 0.0625;
        c.model.style_dim = 8;
        c
    }

    fn names(m: &TranslationModel) -> BTreeSet<String> {
        m.params.params().keys().cloned().collect()
    }

    #[test]
    fn variant_table() {
        let e = TranslationModel::build(&config(Variant::E)).unwrap();
        assert_eq!((e.style_encoder_count(), e.discriminator_count()), (2, 2));
        assert!(e.content_encoder().is_some());
        let d = TranslationModel::build(&config(Variant::D)).unwrap();
        assert_eq!((d.style_encoder_count(), d.discriminator_count()), (1, 1));
        let b = TranslationModel::build(&config(Variant::B)).unwrap();
        let c = TranslationModel::build(&config(Variant::C)).unwrap();
        assert!(b.content_encoder().is_none());
        let (nb, nc) = (names(&b), names(&c));
        let only_c: BTreeSet<_> = nc.difference(&nb).collect();
        let only_b: BTreeSet<_> = nb.difference(&nc).collect();
        assert!(only_b.is_empty());
        assert!(!only_c.is_empty());
        assert!(only_c.iter().all(|n| n.starts_with("content.")));
    }

    #[test]
    fn variant_a_needs_dense_segmentation() {
        let m = Manifest::new(vec![ModalitySpec::keypoints(
            ModalityKind::Keypoints,
            3,
            2.0,
        )])
        .unwrap();
        let c = RunConfig::new(32, Variant::A, &["a"], &m);
        assert!(TranslationModel::build(&c).is_err());
        let b = RunConfig::new(32, Variant::B, &["a"], &m);
        assert!(b.validate().is_ok());
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut e = TranslationModel::build(&config(Variant::E)).unwrap();
        assert!(matches!(
            e.register_domain("a".into()),
            Err(Error::DuplicateDomain(_))
        ));
        let before = e.params.len();
        e.register_domain("c".into()).unwrap();
        assert!(e.params.len() > before);
        assert_eq!(e.style_encoder_count(), 3);
    }

    #[test]
    fn bundles_are_disjoint_in_variant_e() {
        let e = TranslationModel::build(&config(Variant::E)).unwrap();
        let a = e.bundle(&"a".into()).unwrap();
        let b = e.bundle(&"b".into()).unwrap();
        assert_ne!(a.style_prefix(), b.style_prefix());
        assert_ne!(
            e.params.get(&format!("{}stem.weight", a.style_prefix())),
            e.params.get(&format!("{}stem.weight", b.style_prefix()))
        );
        assert!(matches!(
            e.bundle(&"zz".into()),
            Err(Error::UnknownDomain(_))
        ));
    }
}
