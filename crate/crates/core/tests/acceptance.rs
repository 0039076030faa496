//! Acceptance criteria 1-10. Each test prints one `criterion N ...: PASS`
//! or `FAIL` line straight to stdout (visible without `--nocapture`) and
//! then asserts. Tests hold a shared lock so each runtime is measured
//! without competing for the CPU.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use xlate::config::{RunConfig, Variant};
use xlate::discriminator::PatchCritique;
use xlate::domain::{DomainId, ImageTensor};
use xlate::evaluation::{frechet_distance, pairwise_protocol, FeatureStatistics, ProtocolOptions};
use xlate::fixtures;
use xlate::generator::{spade_inject, DenormParams};
use xlate::inference::{reconstruct, transfer_within};
use xlate::losses::{
    feature_reconstruction_loss, hinge_d_loss, hinge_d_var, hinge_g_loss, hinge_g_var,
    LayerWeights, PoolingProbe,
};
use xlate::model::{TranslationModel, SHARED_KEY};
use xlate::nn::NORM_EPS;
use xlate::trace::{CallTrace, TraceEvent};
use xlate::trainer::checkpoint;
use xlate::trainer::{
    build_variant, generator_objective, moving_average, train, train_step, Batch, Schedule,
    TrainState, TrainingSample,
};
use xlate_tensor::{Graph, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

/// Explicit loops over taps and elements: tap `i` is the input average
/// pooled `i` times over 2x2 windows.
fn brute_force_loss(pred: &[f64], target: &[f64], shape: [usize; 4], weights: &[f64]) -> f64 {
    fn pool(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for b in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += x[b * h * w + (2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    out[b * ho * wo + y * wo + xx] = s / 4.0;
                }
            }
        }
        out
    }
    let mut total = 0.0;
    let (mut p, mut t, mut s) = (pred.to_vec(), target.to_vec(), shape);
    for (i, w) in weights.iter().enumerate() {
        if i > 0 {
            p = pool(&p, s);
            t = pool(&t, s);
            s = [s[0], s[1], s[2] / 2, s[3] / 2];
        }
        let mut acc = 0.0;
        for k in 0..p.len() {
            acc += (p[k] - t[k]).abs();
        }
        total += w * acc / p.len() as f64;
    }
    total
}

#[test]
fn criterion_01_loss_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let taps = 1 + case % 5;
        let side = 1 << (taps - 1 + rng.random_range(0..3));
        let shape = [rng.random_range(1..3), rng.random_range(1..4), side, side];
        let len: usize = shape.iter().product();
        let pred: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..taps).map(|_| rng.random_range(0.0..2.0)).collect();
        let got = feature_reconstruction_loss(
            &Tensor::new(&shape, pred.clone()),
            &Tensor::new(&shape, target.clone()),
            &PoolingProbe { taps },
            &LayerWeights::new(w.clone()).unwrap(),
        )
        .unwrap();
        worst = worst.max((got - brute_force_loss(&pred, &target, shape, &w)).abs());
    }
    let t = start.elapsed();
    let pass = worst < 1e-6 && secs(t) < 10.0;
    report(
        1,
        "loss oracle equivalence",
        pass,
        &format!(
            "max |diff| {worst:.2e} < 1e-6 over 20 cases, 1-5 taps; {:.2}s < 10s",
            secs(t)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn constant(v: f64) -> PatchCritique {
    PatchCritique::constant(&[&[2, 1, 4, 4], &[2, 1, 2, 2]], v)
}

/// Largest relative error between the tape gradient and central
/// differences, over every logit. Values are kept away from the kinks.
fn hinge_fd(rng: &mut ChaCha8Rng, which_d: bool) -> f64 {
    let shapes = [[2usize, 1, 4, 4], [2, 1, 2, 2]];
    let draw = |rng: &mut ChaCha8Rng| loop {
        let v: f64 = rng.random_range(-3.0..3.0);
        if (v - 1.0).abs() > 0.05 && (v + 1.0).abs() > 0.05 {
            return v;
        }
    };
    let real: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| draw(rng)))
        .collect();
    let fake: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| draw(rng)))
        .collect();
    let eval = |real: &[Tensor], fake: &[Tensor]| -> f64 {
        let rc = PatchCritique {
            logits: real.to_vec(),
            features: vec![vec![]; real.len()],
        };
        let fc = PatchCritique {
            logits: fake.to_vec(),
            features: vec![vec![]; fake.len()],
        };
        if which_d {
            hinge_d_loss(&rc, &fc).unwrap()
        } else {
            hinge_g_loss(&fc).unwrap()
        }
    };
    let mut g = Graph::new();
    let rv: Vec<_> = real.iter().map(|t| g.input(t.clone(), true)).collect();
    let fv: Vec<_> = fake.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = if which_d {
        hinge_d_var(&mut g, &rv, &fv).unwrap()
    } else {
        hinge_g_var(&mut g, &fv)
    };
    let grads = g.backward(loss);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (side, vars) in [(0, &rv), (1, &fv)] {
        for (s, v) in vars.iter().enumerate() {
            let analytic = grads
                .var(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&shapes[s]));
            for i in 0..analytic.len() {
                let (mut rp, mut fp) = (real.clone(), fake.clone());
                let (mut rm, mut fm) = (real.clone(), fake.clone());
                let (tp, tm) = if side == 0 {
                    (&mut rp, &mut rm)
                } else {
                    (&mut fp, &mut fm)
                };
                tp[s].data_mut()[i] += h;
                tm[s].data_mut()[i] -= h;
                let numeric = (eval(&rp, &fp) - eval(&rm, &fm)) / (2.0 * h);
                let a = analytic.data()[i];
                let scale = a.abs().max(numeric.abs());
                if scale > 0.0 {
                    worst = worst.max((a - numeric).abs() / scale);
                }
            }
        }
    }
    worst
}

#[test]
fn criterion_02_hinge() {
    let _g = serial();
    let start = Instant::now();
    let mixed = PatchCritique {
        logits: vec![Tensor::new(&[1, 1, 2, 2], vec![1.0, -1.0, -1.0, 1.0])],
        features: vec![vec![]],
    };
    let cases = [
        hinge_d_loss(&constant(1.0), &constant(-1.0)).unwrap() == 0.0,
        hinge_d_loss(&constant(0.0), &constant(0.0)).unwrap() == 2.0,
        hinge_d_loss(&constant(2.0), &constant(-3.0)).unwrap() == 0.0,
        hinge_g_loss(&constant(0.0)).unwrap() == 0.0,
        hinge_g_loss(&constant(3.0)).unwrap() == -3.0,
        hinge_g_loss(&mixed).unwrap() == 0.0,
    ];
    let exact = cases.iter().filter(|c| **c).count();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        worst = worst
            .max(hinge_fd(&mut rng, true))
            .max(hinge_fd(&mut rng, false));
    }
    let t = start.elapsed();
    let pass = exact == cases.len() && worst < 1e-4 && secs(t) < 10.0;
    report(
        2,
        "hinge correctness",
        pass,
        &format!(
            "{exact}/{} exact cases; FD max rel err {worst:.2e} < 1e-4; {:.2}s < 10s",
            cases.len(),
            secs(t)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_spade_inject() {
    let _g = serial();
    // x = [1, 2, 3, 4] over a 2x2 plane: mean 2.5, variance 1.25, so the
    // normalized plane is [-1.5, -0.5, 0.5, 1.5] / sqrt(1.25).
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let d = DenormParams {
        scale: Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, -0.5, 2.0]),
        bias: Tensor::new(&[1, 1, 2, 2], vec![0.5, 0.0, 0.0, -1.0]),
    };
    let hand = [
        -0.841_640_786_5,
        -0.894_427_191_0,
        0.223_606_797_7,
        3.024_922_359_5,
    ];
    let out = spade_inject(&x, &d).unwrap();
    let err = out
        .data()
        .iter()
        .zip(hand)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let act = Tensor::randn(&[2, 3, 5, 5], 2.0, &mut rng);
    let zero = DenormParams {
        scale: Tensor::zeros(&[2, 3, 5, 5]),
        bias: Tensor::zeros(&[2, 3, 5, 5]),
    };
    let mut g = Graph::inference();
    let a = g.constant(act.clone());
    let n = g.instance_norm(a, NORM_EPS);
    let identity = spade_inject(&act, &zero).unwrap() == *g.value(n);
    let pass = err < 1e-6 && identity;
    report(
        3,
        "SPADE-inject oracle",
        pass,
        &format!(
            "2x2 hand case max err {err:.2e} < 1e-6; zero scale/bias identity exact: {identity}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

fn variant_structure(v: Variant) -> (bool, bool, usize, usize, Vec<String>) {
    let m = TranslationModel::build(&fixtures::tiny_config(v, &["a", "b"])).unwrap();
    let style_keys: Vec<String> = m.bundles().map(|b| b.style_key.clone()).collect();
    let variational = m.bundles().all(|b| b.style.is_variational());
    (
        m.content_encoder().is_some(),
        variational,
        m.style_encoder_count(),
        m.discriminator_count(),
        style_keys,
    )
}

#[test]
fn criterion_04_architecture() {
    let _g = serial();
    let mut fails: Vec<String> = Vec::new();

    for (res, cfg) in [
        (32, fixtures::tiny_config(Variant::E, &["a"])),
        (64, fixtures::desk_config(Variant::E, &["a"])),
        (128, {
            let mut c = fixtures::tiny_config(Variant::C, &["a"]);
            c.resolution = 128;
            c.modalities =
                RunConfig::new(128, Variant::C, &["a"], &fixtures::fixture_manifest(128))
                    .modalities;
            c
        }),
    ] {
        let m = TranslationModel::build(&cfg).unwrap();
        let fig = fixtures::render_figure(&"a".into(), 0, 1, res);
        let code = m.encode_content(&fig.stack(m.manifest()).unwrap()).unwrap();
        let levels = match code {
            xlate::generator::ContentCode::Pyramid(p) => p.resolutions(),
            xlate::generator::ContentCode::Raw(_) => vec![],
        };
        if levels != [8, 16, 32] {
            fails.push(format!("R={res}: pyramid levels {levels:?}"));
        }
        let s = m.encode_style(&fig.image, &"a".into()).unwrap();
        let bound = (res * res * 3) as f64 / 100.0;
        if s.shape().len() != 1 || s.dim() as f64 >= bound {
            fails.push(format!(
                "R={res}: style shape {:?} vs bound {bound}",
                s.shape()
            ));
        }
        let x = &fig.image;
        let cond = fig.stack(m.manifest()).unwrap();
        if reconstruct(&m, x, &cond).unwrap() != transfer_within(&m, x, x, &cond).unwrap() {
            fails.push(format!(
                "R={res}: reconstruct differs from transfer_within(x, x)"
            ));
        }
    }
    let full = xlate::config::ModelConfig::default();
    if full.style_dim as f64 >= (256 * 256 * 3) as f64 / 100.0 {
        fails.push("full-size style dimension breaks the bottleneck bound".into());
    }

    let shared = vec![SHARED_KEY.to_string(), SHARED_KEY.to_string()];
    let expect = [
        (Variant::A, (false, true, 1, 1, shared.clone())),
        (Variant::B, (false, true, 1, 1, shared.clone())),
        (Variant::C, (true, true, 1, 1, shared.clone())),
        (Variant::D, (true, false, 1, 1, shared)),
        (
            Variant::E,
            (true, false, 2, 2, vec!["a".into(), "b".into()]),
        ),
    ];
    for (v, want) in expect {
        let got = variant_structure(v);
        if got != want {
            fails.push(format!("variant {v}: got {got:?}, expected {want:?}"));
        }
    }
    let names = |v| -> std::collections::BTreeSet<String> {
        TranslationModel::build(&fixtures::tiny_config(v, &["a", "b"]))
            .unwrap()
            .params
            .params()
            .keys()
            .cloned()
            .collect()
    };
    let (b, c) = (names(Variant::B), names(Variant::C));
    if !b.is_subset(&c) || !c.difference(&b).all(|n| n.starts_with("content.")) {
        fails.push("C and B differ by more than the content encoder".into());
    }
    let e = TranslationModel::build(&fixtures::tiny_config(Variant::E, &["a", "b"])).unwrap();
    let (pa, pb) = (
        e.generator_prefixes(&"a".into()).unwrap(),
        e.generator_prefixes(&"b".into()).unwrap(),
    );
    if pa[2] == pb[2]
        || e.bundle(&"a".into()).unwrap().disc_prefix()
            == e.bundle(&"b".into()).unwrap().disc_prefix()
    {
        fails.push("variant E bundles share a prefix".into());
    }
    let mut sparse = fixtures::tiny_config(Variant::A, &["a"]);
    sparse
        .modalities
        .retain(|m| m.id.name() != "densepose-parts");
    if TranslationModel::build(&sparse).is_ok() {
        fails.push("variant A accepted a manifest without dense segmentation".into());
    }
    sparse.variant = Variant::B;
    if TranslationModel::build(&sparse).is_err() {
        fails.push("variant B rejected sparse conditioning".into());
    }

    let pass = fails.is_empty();
    let detail = if pass {
        "levels {8,16,32} at R=32/64/128; style rank 1 under bound; reconstruct == transfer_within(x,x); A-E table holds"
            .to_string()
    } else {
        fails.join("; ")
    };
    report(4, "architecture contracts", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn random_batch(cfg: &RunConfig, n: usize, seed: u64) -> Batch {
    let manifest = cfg.manifest().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.resolution;
    let domain: DomainId = "a".into();
    let samples = (0..n)
        .map(|i| {
            let px = Tensor::uniform(&[3, r, r], -1.0, 1.0, &mut rng);
            let image = ImageTensor::new(px, domain.clone()).unwrap();
            let cond = fixtures::render_figure(&domain, i, seed, r)
                .stack(&manifest)
                .unwrap();
            TrainingSample::new(format!("rand{i}"), image, cond)
        })
        .collect();
    Batch { domain, samples }
}

#[test]
fn criterion_05_gradient_connectivity() {
    let _g = serial();
    let start = Instant::now();
    let cfg = fixtures::desk_config(Variant::E, &["a", "b"]);
    let state = build_variant(&cfg).unwrap();
    let model = &state.model;
    let batch = random_batch(&cfg, 2, 505);
    let (g, terms) = generator_objective(model, &batch, None).unwrap();
    let base = g.value(terms.total).item();
    let grads = g.backward(terms.total).into_params();

    let prefixes = model.generator_prefixes(&"a".into()).unwrap();
    let trainable: Vec<&String> = model
        .params
        .params()
        .keys()
        .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
        .collect();
    let dead: Vec<&String> = trainable
        .iter()
        .copied()
        .filter(|k| grads.get(*k).is_none_or(|t| t.max_abs() == 0.0))
        .collect();
    let leaked = grads
        .keys()
        .any(|k| !prefixes.iter().any(|p| k.starts_with(p)));

    // Ten tensors spread over the sorted names; in each, the entry with
    // the largest gradient.
    let probes: Vec<(String, usize)> = (0..10)
        .map(|i| {
            let name = trainable[i * (trainable.len() - 1) / 9].clone();
            let gr = &grads[&name];
            let idx = (0..gr.len())
                .max_by(|&a, &b| gr.data()[a].abs().total_cmp(&gr.data()[b].abs()))
                .unwrap();
            (name, idx)
        })
        .collect();
    let eval = |name: &str, idx: usize, delta: f64| {
        let mut m = model.clone();
        m.params.get_mut(name).unwrap().data_mut()[idx] += delta;
        let (g, t) = generator_objective(&m, &batch, None).unwrap();
        g.value(t.total).item()
    };
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, idx) in &probes {
        let w = model.params.get(name).data()[*idx];
        let h = 1e-6 * w.abs().max(1.0);
        let numeric = (eval(name, *idx, h) - eval(name, *idx, -h)) / (2.0 * h);
        let analytic = grads[name].data()[*idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{idx}]");
        }
    }
    let t = start.elapsed();
    let pass = dead.is_empty() && !leaked && base.is_finite() && worst < 1e-3 && secs(t) < 120.0;
    report(
        5,
        "gradient connectivity",
        pass,
        &format!(
            "{}/{} trainable tensors with nonzero gradient{}; FD max rel err {worst:.2e} < 1e-3 at {worst_at}; {:.1}s < 120s",
            trainable.len() - dead.len(),
            trainable.len(),
            if dead.is_empty() { String::new() } else { format!(" (dead: {dead:?})") },
            secs(t)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_overfit() {
    let _g = serial();
    let start = Instant::now();
    let cfg = fixtures::desk_config(Variant::E, &["a"]);
    let data = fixtures::training_set(&cfg, 16).unwrap();
    let mut state = build_variant(&cfg).unwrap();
    let result = train(&mut state, &data, 2000, None, None);
    let t = start.elapsed();
    let (pass, detail) = match result {
        Err(e) => (
            false,
            format!("training aborted at step {}: {e}", state.step),
        ),
        Ok(()) => {
            let h = &state.history;
            let finite = h.iter().all(|r| r.losses.all_finite());
            let at50 = moving_average(h, 50, 50);
            let last = moving_average(h, h.len(), 50);
            let samples = &data[&"a".into()];
            let mae = samples
                .iter()
                .map(|s| {
                    reconstruct(&state.model, &s.image, &s.cond)
                        .unwrap()
                        .mean_abs_error(&s.image)
                })
                .sum::<f64>()
                / samples.len() as f64;
            let pass = finite && last < 0.5 * at50 && mae < 0.15 && secs(t) < 4.0 * 3600.0;
            (
                pass,
                format!(
                    "recon_perceptual final 50-step mean {last:.4} vs 0.5 x step-50 mean {at50:.4}; \
                     reconstruction mean-abs {mae:.4} < 0.15; finite at all {} steps: {finite}; {:.0}s < 4h",
                    h.len(),
                    secs(t)
                ),
            )
        }
    };
    report(6, "overfit convergence", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn bundle_hash(state: &TrainState, key: &str) -> String {
    let ps = &state.model.params;
    let prefixes = [format!("style.{key}."), format!("disc.{key}.")];
    let mut h = Sha256::new();
    for (name, t) in ps.params().iter().chain(ps.buffers()) {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn criterion_07_isolation() {
    let _g = serial();
    let cfg = fixtures::tiny_config(Variant::E, &["a", "b"]);
    let data = fixtures::training_set(&cfg, 6).unwrap();
    let mut state = build_variant(&cfg).unwrap();
    let trace = CallTrace::new();
    state.model.set_trace(Some(trace.clone()));
    let schedule = Schedule::new(&cfg, &data).unwrap();
    let mut violations = Vec::new();
    let mut steps_per_domain = std::collections::BTreeMap::new();
    for step in 0..50 {
        let batch = schedule.batch(step, &data);
        let other = if batch.domain.as_str() == "a" {
            "b"
        } else {
            "a"
        };
        let before = bundle_hash(&state, other);
        let own_before = bundle_hash(&state, batch.domain.as_str());
        train_step(&mut state, &batch).unwrap();
        if bundle_hash(&state, other) != before {
            violations.push(format!(
                "step {step}: {} update changed bundle {other}",
                batch.domain
            ));
        }
        if bundle_hash(&state, batch.domain.as_str()) == own_before {
            violations.push(format!("step {step}: own bundle unchanged"));
        }
        *steps_per_domain
            .entry(batch.domain.to_string())
            .or_insert(0) += 1;
    }
    let events = trace.events();
    let mut synth = 0;
    for e in &events {
        match e {
            TraceEvent::Synthesized {
                content_source,
                style_source,
                content_domain,
                style_domain,
                ..
            } => {
                synth += 1;
                if content_domain != style_domain || content_source != style_source {
                    violations.push(format!("cross synthesis {content_source}/{content_domain} x {style_source}/{style_domain}"));
                }
            }
            TraceEvent::StyleEncoded { key, image_domain } if key != image_domain.as_str() => {
                violations.push(format!(
                    "style encoder {key} read an image of {image_domain}"
                ));
            }
            _ => {}
        }
    }
    let pass = violations.is_empty() && synth == 50 * cfg.batch_size;
    report(
        7,
        "training isolation",
        pass,
        &format!(
            "50 steps {steps_per_domain:?}; other bundle hash unchanged after every step; {synth} syntheses, all within-domain same-source{}",
            if violations.is_empty() { String::new() } else { format!("; violations: {violations:?}") }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn stats_from_rows(rows: &[Vec<f64>]) -> FeatureStatistics {
    let mut s = FeatureStatistics::empty(rows[0].len());
    for r in rows {
        s.push(r);
    }
    s
}

fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, f) = (rows.len(), rows[0].len());
    let mut mean = vec![0.0; f];
    for r in rows {
        for j in 0..f {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; f]; f];
    for r in rows {
        for i in 0..f {
            for j in 0..f {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);
    (mean, cov)
}

#[test]
fn criterion_08_fid_properties() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let rows = |n: usize, f: usize, shift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..f)
                    .map(|_| rng.random_range(-1.0..1.0) + shift)
                    .collect()
            })
            .collect()
    };
    let mut self_worst = 0.0f64;
    let mut sym_worst = 0.0f64;
    let mut stream_worst = 0.0f64;
    for trial in 0..5 {
        let ra = rows(120, 64, 0.0, &mut rng);
        let rb = rows(90, 64, 0.1 * trial as f64, &mut rng);
        let (a, b) = (stats_from_rows(&ra), stats_from_rows(&rb));
        self_worst = self_worst.max(frechet_distance(&a, &a).unwrap());
        sym_worst = sym_worst
            .max((frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs());
        let (mean, cov) = two_pass(&ra);
        let c = a.covariance();
        for i in 0..64 {
            stream_worst = stream_worst.max((a.mean()[i] - mean[i]).abs());
            for j in 0..64 {
                stream_worst = stream_worst.max((c[(i, j)] - cov[i][j]).abs());
            }
        }
    }
    let one_d = |mu: f64, var: f64| {
        FeatureStatistics::from_moments(vec![mu], &nalgebra::DMatrix::from_element(1, 1, var), 10)
            .unwrap()
    };
    let c1 = frechet_distance(&one_d(0.0, 1.0), &one_d(1.0, 1.0)).unwrap();
    let c2 = frechet_distance(&one_d(0.0, 1.0), &one_d(0.0, 4.0)).unwrap();
    let t = start.elapsed();
    let pass = self_worst < 1e-6
        && sym_worst < 1e-6
        && c1 == 1.0
        && c2 == 1.0
        && stream_worst < 1e-8
        && secs(t) < 30.0;
    report(
        8,
        "FID properties",
        pass,
        &format!(
            "self {self_worst:.2e} < 1e-6; symmetry {sym_worst:.2e} < 1e-6; 1-D cases {c1}, {c2} (exact 1.0); \
             streaming vs two-pass {stream_worst:.2e} < 1e-8; {:.2}s < 30s",
            secs(t)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_protocol_counts() {
    let _g = serial();
    let start = Instant::now();
    let cfg = fixtures::tiny_config(Variant::E, &["a", "b"]);
    let state = build_variant(&cfg).unwrap();
    let data = fixtures::training_set(&cfg, 100).unwrap();
    let (a, b) = (&data[&"a".into()], &data[&"b".into()]);
    let reference: Vec<&ImageTensor> = b.iter().take(20).map(|s| &s.image).collect();
    let opts = ProtocolOptions::default();
    let big = pairwise_protocol(&state.model, a, b, &reference, &opts).unwrap();
    let small = pairwise_protocol(&state.model, &a[..3], &b[..4], &reference, &opts).unwrap();
    let t = start.elapsed();
    let pass = big.n_outputs() == 10_000
        && big.record.n_pairs == 10_000
        && small.n_outputs() == 12
        && big.record.fid.is_some_and(f64::is_finite);
    report(
        9,
        "protocol counts",
        pass,
        &format!(
            "100x100 -> {} outputs (fid {:.3}); 3x4 -> {}; {:.1}s",
            big.n_outputs(),
            big.record.fid.unwrap_or(f64::NAN),
            small.n_outputs(),
            secs(t)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn run_steps(cfg: &RunConfig, steps: u64) -> TrainState {
    let data = fixtures::training_set(cfg, 5).unwrap();
    let mut state = build_variant(cfg).unwrap();
    train(&mut state, &data, steps, None, None).unwrap();
    state
}

#[test]
fn criterion_10_reproducibility() {
    let _g = serial();
    let mut details = Vec::new();
    let mut pass = true;
    for v in [Variant::C, Variant::E] {
        let cfg = fixtures::tiny_config(v, &["a", "b"]);
        let data = fixtures::training_set(&cfg, 5).unwrap();
        let one = run_steps(&cfg, 10);
        let two = run_steps(&cfg, 10);
        let losses = |s: &TrainState| {
            s.history
                .iter()
                .map(|r| r.losses.clone())
                .collect::<Vec<_>>()
        };
        let same = losses(&one) == losses(&two);

        let mut half = build_variant(&cfg).unwrap();
        train(&mut half, &data, 6, None, None).unwrap();
        let mut resumed = checkpoint::decode(&checkpoint::encode(&half), Some(&cfg)).unwrap();
        train(&mut resumed, &data, 10, None, None).unwrap();
        let next_equal = resumed.history[6].losses == one.history[6].losses;
        let rest_equal = losses(&resumed) == losses(&one);
        pass &= same && next_equal && rest_equal;
        details.push(format!(
            "variant {v}: 10-step sequences identical {same}; resume at 6 next-step loss bit-equal {next_equal}, steps 6-9 equal {rest_equal}"
        ));
    }
    report(10, "reproducibility", pass, &details.join("; "));
    assert!(pass);
}
