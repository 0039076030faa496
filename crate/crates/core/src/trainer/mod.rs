//! Reconstruction-only training: every synthesis uses content and style
//! from the same image, and each step updates the critic before the
//! generator side.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xlate_tensor::{Graph, Tensor, Var};

use crate::conditioning::ConditioningStack;
use crate::config::RunConfig;
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_terms, generator_terms, GeneratorTerms, Lambdas, LayerWeights, LossReport,
};
use crate::model::{component_seed, ForwardVars, TranslationModel};
use crate::optim::Adam;
use crate::trace::TraceEvent;

/// An image with the conditioning derived from it. `cond_source` names the
/// image the conditioning was extracted from.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub id: String,
    pub image: ImageTensor,
    pub cond: ConditioningStack,
    pub cond_source: String,
}

impl TrainingSample {
    pub fn new(id: impl Into<String>, image: ImageTensor, cond: ConditioningStack) -> Self {
        let id = id.into();
        Self {
            cond_source: id.clone(),
            id,
            image,
            cond,
        }
    }
}

/// A single-domain batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub domain: DomainId,
    pub samples: Vec<TrainingSample>,
}

impl Batch {
    /// Rejects any sample whose conditioning came from another image or
    /// whose image belongs to another domain.
    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::TooFew {
                what: "samples in batch".into(),
                needed: 1,
                found: 0,
            });
        }
        for s in &self.samples {
            if s.cond_source != s.id {
                return Err(Error::CrossSourceSynthesis {
                    content: s.cond_source.clone(),
                    style: s.id.clone(),
                });
            }
            if s.image.domain() != &self.domain {
                return Err(Error::DomainMismatch {
                    content: self.domain.clone(),
                    style: s.image.domain().clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub domain: DomainId,
    #[serde(flatten)]
    pub losses: LossReport,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: TranslationModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub history: Vec<StepRecord>,
}

/// Builds the model for the configured variant with fresh optimizers.
pub fn build_variant(config: &RunConfig) -> Result<TrainState> {
    let model = TranslationModel::build(config)?;
    let o = &config.optim;
    Ok(TrainState {
        model,
        opt_g: Adam::new(o.lr_g, o.beta1, o.beta2, o.eps),
        opt_d: Adam::new(o.lr_d, o.beta1, o.beta2, o.eps),
        step: 0,
        history: Vec::new(),
    })
}

fn diagnostic(report: &LossReport, state: &TrainState) -> String {
    let bad: Vec<&String> = state
        .model
        .params
        .params()
        .iter()
        .filter(|(_, t)| !t.all_finite())
        .map(|(k, _)| k)
        .take(8)
        .collect();
    format!(
        "losses {}; non-finite parameters {:?}",
        serde_json::to_string(report).unwrap_or_default(),
        bad
    )
}

/// The generator side of a within-domain reconstruction on a tape whose
/// trainable parameters are the content encoder, the domain's style
/// encoder and the generator.
pub struct ReconstructionTape {
    pub graph: Graph,
    pub real: Var,
    pub fwd: ForwardVars,
    pub images: Tensor,
    pub cond: Tensor,
}

pub fn reconstruction_tape(
    model: &TranslationModel,
    batch: &Batch,
    noise: Option<&Tensor>,
) -> Result<ReconstructionTape> {
    let images: Vec<&ImageTensor> = batch.samples.iter().map(|s| &s.image).collect();
    let conds: Vec<&ConditioningStack> = batch.samples.iter().map(|s| &s.cond).collect();
    let images = ImageTensor::batch(&images);
    let cond = ConditioningStack::batch(&conds);
    let prefixes = model.generator_prefixes(&batch.domain)?;
    let mut g = Graph::with_trainable(move |name| prefixes.iter().any(|p| name.starts_with(p)));
    let real = g.constant(images.clone());
    let fwd = model.forward_reconstruction(&mut g, real, &cond, &batch.domain, noise)?;
    Ok(ReconstructionTape {
        graph: g,
        real,
        fwd,
        images,
        cond,
    })
}

fn objective_terms(
    model: &TranslationModel,
    g: &mut Graph,
    real: Var,
    fwd: &ForwardVars,
    domain: &DomainId,
) -> Result<GeneratorTerms> {
    let cfg = model.config();
    let bundle = model.bundle(domain)?;
    let pw = LayerWeights::new(cfg.loss.perceptual_weights.clone())?;
    let cond_g = cfg.model.conditional_discriminator.then_some(fwd.cond);
    generator_terms(
        g,
        real,
        fwd.fake,
        &bundle.disc,
        &model.params,
        model.probe(),
        &pw,
        &Lambdas::from(&cfg.loss),
        fwd.kl,
        cond_g,
    )
}

/// The full generator objective of `batch` against the current critic, as
/// minimized by a training step. `noise` drives variational sampling.
pub fn generator_objective(
    model: &TranslationModel,
    batch: &Batch,
    noise: Option<&Tensor>,
) -> Result<(Graph, GeneratorTerms)> {
    batch.check()?;
    let ReconstructionTape {
        mut graph,
        real,
        fwd,
        ..
    } = reconstruction_tape(model, batch, noise)?;
    let terms = objective_terms(model, &mut graph, real, &fwd, &batch.domain)?;
    Ok((graph, terms))
}

/// One critic update then one generator-side update on a within-domain
/// reconstruction of `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    let start = Instant::now();
    batch.check()?;
    let domain = &batch.domain;
    let bundle = state.model.bundle(domain)?.clone();
    for s in &batch.samples {
        state.model.record(TraceEvent::Synthesized {
            content_source: s.cond_source.clone(),
            style_source: s.id.clone(),
            content_domain: domain.clone(),
            style_domain: s.image.domain().clone(),
            training: true,
        });
    }
    let cfg = state.model.config().clone();
    let n = batch.samples.len();

    bundle.disc.power_iterate(&mut state.model.params);

    let noise = bundle.style.is_variational().then(|| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(component_seed(cfg.seed, &format!("noise.{}", state.step)));
        Tensor::randn(&[n, cfg.model.style_dim], 1.0, &mut rng)
    });
    let ReconstructionTape {
        graph: mut g,
        real,
        fwd,
        images,
        cond,
    } = reconstruction_tape(&state.model, batch, noise.as_ref())?;

    let conditional = cfg.model.conditional_discriminator;
    let disc_prefix = bundle.disc_prefix();
    let mut gd = Graph::with_trainable(move |name| name.starts_with(&disc_prefix));
    let real_d = gd.constant(images);
    let fake_d = gd.constant(g.value(fwd.fake).clone());
    let cond_d = conditional.then(|| gd.constant(cond.clone()));
    let (loss_d, _, _) = discriminator_terms(
        &mut gd,
        real_d,
        fake_d,
        &bundle.disc,
        &state.model.params,
        cond_d,
    )?;
    let mut report = LossReport {
        adv_d: gd.value(loss_d).item(),
        ..LossReport::default()
    };
    report.total_d = report.adv_d;
    if !report.adv_d.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            domain: domain.clone(),
            diagnostic: diagnostic(&report, state),
        });
    }
    let grads_d = gd.backward(loss_d).into_params();
    debug_assert!(grads_d.keys().all(|k| k.starts_with(&bundle.disc_prefix())));
    state.opt_d.step(&mut state.model.params, &grads_d);

    let terms = objective_terms(&state.model, &mut g, real, &fwd, domain)?;
    report.recon_perceptual = g.value(terms.perceptual).item();
    report.recon_disc_features = g.value(terms.disc_features).item();
    report.adv_g = g.value(terms.adv).item();
    report.kl = fwd.kl.map(|k| g.value(k).item()).unwrap_or(0.0);
    report.total_g = g.value(terms.total).item();
    if !report.all_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            domain: domain.clone(),
            diagnostic: diagnostic(&report, state),
        });
    }
    let grads_g = g.backward(terms.total).into_params();
    debug_assert!(grads_g.keys().all(|k| !k.starts_with("disc.")));
    state.opt_g.step(&mut state.model.params, &grads_g);
    for s in &batch.samples {
        state.model.record(TraceEvent::LossComputed {
            domain: domain.clone(),
            source: s.id.clone(),
        });
    }

    state.history.push(StepRecord {
        step: state.step,
        domain: domain.clone(),
        losses: report.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    state.step += 1;
    debug!(
        "step {} [{}] perceptual {:.4} total_g {:.4} total_d {:.4}",
        state.step, domain, report.recon_perceptual, report.total_g, report.total_d
    );
    Ok(report)
}

/// Per-domain training data.
pub type TrainingSet = BTreeMap<DomainId, Vec<TrainingSample>>;

/// Which samples make up the batch at a given step. Domains alternate
/// round-robin; within a domain each epoch is a seeded permutation and the
/// last partial batch is dropped.
#[derive(Clone, Debug)]
pub struct Schedule {
    seed: u64,
    batch_size: usize,
    domains: Vec<(DomainId, usize)>,
}

impl Schedule {
    pub fn new(config: &RunConfig, data: &TrainingSet) -> Result<Self> {
        let mut domains = Vec::new();
        for d in &config.domains {
            let Some(samples) = data.get(d) else {
                continue;
            };
            if samples.len() < config.batch_size {
                return Err(Error::TooFew {
                    what: format!("training images in domain `{d}`"),
                    needed: config.batch_size,
                    found: samples.len(),
                });
            }
            domains.push((d.clone(), samples.len()));
        }
        if domains.is_empty() {
            return Err(Error::TooFew {
                what: "domains with training data".into(),
                needed: 1,
                found: 0,
            });
        }
        Ok(Self {
            seed: config.seed,
            batch_size: config.batch_size,
            domains,
        })
    }

    pub fn indices(&self, step: u64) -> (&DomainId, Vec<usize>) {
        let nd = self.domains.len() as u64;
        let (domain, len) = &self.domains[(step % nd) as usize];
        let local = step / nd;
        let per_epoch = (*len / self.batch_size) as u64;
        let epoch = local / per_epoch;
        let k = (local % per_epoch) as usize;
        let mut perm: Vec<usize> = (0..*len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(
            self.seed,
            &format!("batches.{domain}.{epoch}"),
        ));
        perm.shuffle(&mut rng);
        (
            domain,
            perm[k * self.batch_size..(k + 1) * self.batch_size].to_vec(),
        )
    }

    pub fn batch(&self, step: u64, data: &TrainingSet) -> Batch {
        let (domain, idx) = self.indices(step);
        let samples = &data[domain];
        Batch {
            domain: domain.clone(),
            samples: idx.into_iter().map(|i| samples[i].clone()).collect(),
        }
    }
}

/// Runs until `state.step == until`, writing one metrics line per step to
/// `metrics` and a checkpoint every `checkpoint_every` steps (and at the
/// end) when `checkpoint_path` is given.
pub fn train(
    state: &mut TrainState,
    data: &TrainingSet,
    until: u64,
    mut metrics: Option<&mut dyn Write>,
    checkpoint_path: Option<&Path>,
) -> Result<()> {
    let schedule = Schedule::new(state.model.config(), data)?;
    let cadence = state.model.config().checkpoint_every.max(1);
    while state.step < until {
        let batch = schedule.batch(state.step, data);
        train_step(state, &batch)?;
        let rec = state.history.last().expect("step recorded");
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(
                w,
                "{}",
                serde_json::to_string(rec).expect("record serializes")
            )?;
        }
        if state.step.is_multiple_of(50) {
            info!(
                "step {} [{}] perceptual {:.4} total_g {:.4}",
                state.step, rec.domain, rec.losses.recon_perceptual, rec.losses.total_g
            );
        }
        if let Some(p) = checkpoint_path {
            if state.step.is_multiple_of(cadence) || state.step == until {
                checkpoint::save(state, p)?;
            }
        }
    }
    Ok(())
}

/// Trailing mean of `recon_perceptual` over `window` steps ending at `end`
/// (exclusive).
pub fn moving_average(history: &[StepRecord], end: usize, window: usize) -> f64 {
    let end = end.min(history.len());
    let start = end.saturating_sub(window);
    let s: f64 = history[start..end]
        .iter()
        .map(|r| r.losses.recon_perceptual)
        .sum();
    s / (end - start).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::fixtures;

    fn tiny(variant: Variant) -> (TrainState, TrainingSet) {
        let mut cfg = fixtures::tiny_config(variant, &["a", "b"]);
        cfg.batch_size = 2;
        let data = fixtures::training_set(&cfg, 4).unwrap();
        (build_variant(&cfg).unwrap(), data)
    }

    #[test]
    fn schedule_is_pure_and_round_robin() {
        let (state, data) = tiny(Variant::E);
        let s = Schedule::new(state.model.config(), &data).unwrap();
        assert_eq!(s.indices(0).0.as_str(), "a");
        assert_eq!(s.indices(1).0.as_str(), "b");
        assert_eq!(s.indices(6), s.indices(6));
        let mut epoch: Vec<usize> = (0..2).flat_map(|k| s.indices(2 * k).1).collect();
        epoch.sort();
        assert_eq!(epoch, vec![0, 1, 2, 3]);
    }

    #[test]
    fn cross_source_batch_is_rejected() {
        let (mut state, data) = tiny(Variant::E);
        let mut batch = Batch {
            domain: "a".into(),
            samples: data[&DomainId::from("a")][..2].to_vec(),
        };
        batch.samples[0].cond = batch.samples[1].cond.clone();
        batch.samples[0].cond_source = batch.samples[1].id.clone();
        assert!(matches!(
            train_step(&mut state, &batch),
            Err(Error::CrossSourceSynthesis { .. })
        ));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn step_updates_generator_and_is_finite() {
        for v in [Variant::B, Variant::E] {
            let (mut state, data) = tiny(v);
            let before = state.model.params.clone();
            let s = Schedule::new(state.model.config(), &data).unwrap();
            let r = train_step(&mut state, &s.batch(0, &data)).unwrap();
            assert!(r.all_finite());
            let changed = before
                .params()
                .iter()
                .filter(|(k, t)| k.starts_with("gen.") && state.model.params.get(k) != *t)
                .count();
            assert!(changed > 0, "variant {v}");
        }
    }
}
