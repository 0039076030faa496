use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlate_tensor::{Graph, Tensor};

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()
                                        [((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_matches_direct_loops(
        seed in 0u64..1000,
        c in 1usize..4,
        o in 1usize..4,
        h in 4usize..9,
        k in prop::sample::select(vec![1usize, 3, 4]),
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, c, h, h + 1], 1.0, &mut rng);
        let w = Tensor::randn(&[o, c, k, k], 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, stride, pad);
        let expect = naive_conv(&x, &w, stride, pad);
        prop_assert_eq!(g.value(y).shape(), expect.shape());
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bilinear_preserves_constants(v in -3.0f64..3.0, h in 2usize..10, ho in 1usize..20) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 1, h, h], v));
        let y = g.resize_bilinear(x, ho, ho);
        for a in g.value(y).data() {
            prop_assert!((a - v).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_doubling_matches_half_pixel_convention() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]));
    let y = g.resize_bilinear(x, 1, 4);
    assert_eq!(g.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn instance_norm_zero_variance_is_finite() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::full(&[1, 2, 3, 3], 4.0));
    let y = g.instance_norm(x, 1e-7);
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}
