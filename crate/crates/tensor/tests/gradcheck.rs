//! Central finite differences against the reverse pass, one test per op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlate_tensor::{Graph, Tensor, Var};

/// Builds `sum(op(inputs) * probe)` for a fixed random probe.
fn scalar_loss(
    inputs: &[Tensor],
    op: &dyn Fn(&mut Graph, &[Var]) -> Var,
    probe_seed: u64,
) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = op(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let prod = g.mul(out, probe);
    let loss = g.sum(prod);
    (g, vars, loss)
}

fn check(inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Var) {
    let (g, vars, loss) = scalar_loss(&inputs, &op, 99);
    let grads = g.backward(loss);
    let eps = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.var(vars[i]).expect("input gradient");
        let stride = (input.len() / 7).max(1);
        for j in (0..input.len()).step_by(stride) {
            let eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[i].data_mut()[j] += delta;
                let (g, _, l) = scalar_loss(&perturbed, &op, 99);
                g.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs();
            assert!(
                err <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                "input {i} elem {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv2d_stride_and_padding() {
    for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 1)] {
        check(
            vec![
                rand(&[2, 3, 7, 6], 1),
                rand(&[4, 3, k, k], 2),
                rand(&[4], 3),
            ],
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        );
    }
}

#[test]
fn linear_layer() {
    check(
        vec![rand(&[3, 5], 4), rand(&[2, 5], 5), rand(&[2], 6)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn instance_norm() {
    check(vec![rand(&[2, 3, 4, 5], 7)], |g, v| {
        g.instance_norm(v[0], 1e-5)
    });
}

#[test]
fn pooling_and_resampling() {
    check(vec![rand(&[1, 2, 6, 4], 8)], |g, v| g.avg_pool2(v[0]));
    check(vec![rand(&[2, 2, 3, 3], 9)], |g, v| g.global_avg_pool(v[0]));
    check(vec![rand(&[1, 2, 3, 2], 10)], |g, v| {
        g.upsample_nearest2(v[0])
    });
    check(vec![rand(&[1, 2, 8, 8], 11)], |g, v| {
        g.resize_bilinear(v[0], 3, 5)
    });
    check(vec![rand(&[1, 2, 4, 4], 12)], |g, v| {
        g.resize_bilinear(v[0], 16, 8)
    });
}

#[test]
fn structural_ops() {
    check(
        vec![rand(&[2, 2, 3, 3], 13), rand(&[2, 3, 3, 3], 14)],
        |g, v| g.concat_channels(&[v[0], v[1]]),
    );
    check(vec![rand(&[2, 4], 15)], |g, v| {
        g.broadcast_spatial(v[0], 3, 2)
    });
    check(vec![rand(&[2, 6], 16)], |g, v| {
        g.reshape(v[0], &[2, 6, 1, 1])
    });
}

#[test]
fn pointwise_ops() {
    check(vec![rand(&[3, 4], 17), rand(&[3, 4], 18)], |g, v| {
        let a = g.mul(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.add(b, v[0]);
        let d = g.tanh(c);
        let e = g.exp(d);
        let f = g.scale(e, -0.7);
        let h = g.add_scalar(f, 0.3);
        g.leaky_relu(h, 0.2)
    });
}

#[test]
fn reductions() {
    check(vec![rand(&[3, 4], 19), rand(&[3, 4], 20)], |g, v| {
        g.mean_abs_diff(v[0], v[1])
    });
    check(vec![rand(&[3, 4], 21)], |g, v| g.mean(v[0]));
    check(vec![rand(&[3, 4], 22)], |g, v| g.sum(v[0]));
}

#[test]
fn spectral_norm() {
    let u: Vec<f64> = rand(&[4], 23).into_data();
    let v: Vec<f64> = rand(&[18], 24).into_data();
    check(vec![rand(&[4, 2, 3, 3], 25)], move |g, x| {
        g.spectral_norm(x[0], &u, &v)
    });
}

#[test]
fn square_via_self_product() {
    check(vec![rand(&[5], 26)], |g, v| g.mul(v[0], v[0]));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut g = Graph::with_trainable(|name| name.starts_with("train."));
    let w = Tensor::full(&[2, 2], 0.5);
    let a = g.param("train.w", &w);
    let b = g.param("frozen.w", &w);
    let again = g.param("train.w", &w);
    assert_eq!(a, again);
    let x = g.constant(Tensor::full(&[1, 2], 1.0));
    let ya = g.linear(x, a, None);
    let yb = g.linear(x, b, None);
    let s = g.add(ya, yb);
    let loss = g.sum(s);
    let grads = g.backward(loss).into_params();
    assert!(grads.contains_key("train.w"));
    assert!(!grads.contains_key("frozen.w"));
}

#[test]
fn inference_graph_tracks_nothing() {
    let mut g = Graph::inference();
    let a = g.param("w", &Tensor::full(&[1], 2.0));
    let s = g.sum(a);
    assert!(!g.requires_grad(s));
    assert!(g.backward(s).into_params().is_empty());
}
