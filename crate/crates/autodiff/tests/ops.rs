use morphprint_autodiff::{
    grad_check, normal, operator_suite, AutodiffError, Graph, ParamSet, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct quadruple loop, independent of the im2col/gemm path.
fn naive_conv(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: &[f64],
    (c_out, ks): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for ki in 0..ks {
                        for kj in 0..ks {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize]
                                * k[((co * c_in + ci) * ks + ki) * ks + kj];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = normal(&[3, 5, 4], 1.0, &mut rng);
    let mut k = vec![0.0; 9];
    for c in 0..3 {
        k[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(Tensor::new(&[3, 3, 1, 1], k).unwrap());
    let y = g.conv2d(xv, kv, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_matches_naive_reference() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, c_out) = (3, 4);
        let x = normal(&[c_in, 8, 8], 1.0, &mut rng);
        let k = normal(&[c_out, c_in, 3, 3], 1.0, &mut rng);
        let b = normal(&[c_out], 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
            let (reference, oh, ow) = naive_conv(
                x.data(),
                (c_in, 8, 8),
                k.data(),
                (c_out, 3),
                b.data(),
                stride,
                pad,
            );
            assert_eq!(g.value(y).shape(), [c_out, oh, ow]);
            assert_eq!(oh, (8 + 2 * pad - 3) / stride + 1);
            let err = g
                .value(y)
                .data()
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "seed {seed} stride {stride} pad {pad}: {err}");
        }
    }
}

#[test]
fn conv_shape_mismatch_names_operator() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("conv2d") && msg.contains("[1, 3, 3, 3]"),
        "{msg}"
    );
}

#[test]
fn relu_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), [0.0, 0.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::vector(vec![0.0, 1.0])).unwrap();
    let mut g = Graph::new();
    let x = g.param_from(&p, "x").unwrap();
    let y = g.relu(x);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), [0.0, 1.0]);
}

#[test]
fn euclidean_distance_value() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let d = g.euclidean_distance(a, b).unwrap();
    assert_eq!(g.value(d).data(), [5.0]);
}

#[test]
fn sum_gradient_is_ones() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::vector(vec![0.3, -2.0, 7.0])).unwrap();
    let mut g = Graph::new();
    let x = g.param_from(&p, "x").unwrap();
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), [1.0, 1.0, 1.0]);
}

#[test]
fn distance_gradient_is_unit_direction() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::vector(vec![3.0, 4.0])).unwrap();
    let mut g = Graph::new();
    let x = g.param_from(&p, "x").unwrap();
    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let d = g.euclidean_distance(x, z).unwrap();
    let grads = g.backward(d).unwrap();
    let gx = grads.get("x").unwrap().data();
    assert!((gx[0] - 0.6).abs() < 1e-15 && (gx[1] - 0.8).abs() < 1e-15);
}

#[test]
fn second_backward_is_an_error() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::vector(vec![1.0])).unwrap();
    let mut g = Graph::new();
    let x = g.param_from(&p, "x").unwrap();
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(matches!(
        g.backward(l),
        Err(AutodiffError::AlreadyBackpropagated)
    ));
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.backward(x),
        Err(AutodiffError::NonScalarLoss(_))
    ));
}

#[test]
fn unreachable_params_get_zero_gradient() {
    let mut p = ParamSet::new();
    p.insert("used", Tensor::vector(vec![1.0, 2.0])).unwrap();
    p.insert("unused", Tensor::vector(vec![5.0])).unwrap();
    let mut g = Graph::new();
    let u = g.param_from(&p, "used").unwrap();
    let _ = g.param_from(&p, "unused").unwrap();
    let l = g.sum(u);
    let mut grads = g.backward(l).unwrap();
    grads.fill_missing(&p);
    assert_eq!(grads.get("unused").unwrap().data(), [0.0]);
}

#[test]
fn linear_sum_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamSet::new();
    p.insert("w", normal(&[4, 6], 1.0, &mut rng)).unwrap();
    p.insert("b", normal(&[4], 1.0, &mut rng)).unwrap();
    let x = normal(&[6], 1.0, &mut rng);
    let r = grad_check(
        |g, p| {
            let w = g.param_from(p, "w")?;
            let b = g.param_from(p, "b")?;
            let xv = g.constant(x.clone());
            let y = g.linear(xv, w, Some(b))?;
            Ok(g.sum(y))
        },
        &p,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
    assert_eq!(r.coords, 28);
}

#[test]
fn conv_relu_pool_linear_chain_gradcheck() {
    let mut checked = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("k", normal(&[3, 2, 3, 3], 0.5, &mut rng)).unwrap();
        p.insert("b", normal(&[3], 0.5, &mut rng)).unwrap();
        p.insert("w", normal(&[2, 3 * 3 * 3], 0.5, &mut rng))
            .unwrap();
        let x = normal(&[2, 6, 6], 1.0, &mut rng);

        // Skip draws whose pre-activations sit near the relu kink.
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.param_from(&p, "k").unwrap();
        let bv = g.param_from(&p, "b").unwrap();
        let pre = g.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
        if g.value(pre).data().iter().any(|v| v.abs() < 1e-2) {
            continue;
        }
        let r = grad_check(
            |g, p| {
                let xv = g.constant(x.clone());
                let k = g.param_from(p, "k")?;
                let b = g.param_from(p, "b")?;
                let w = g.param_from(p, "w")?;
                let h = g.conv2d(xv, k, Some(b), 1, 1)?;
                let h = g.relu(h);
                let h = g.max_pool2(h)?;
                let h = g.flatten(h);
                let y = g.linear(h, w, None)?;
                let y = g.square(y);
                Ok(g.sum(y))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        checked += 1;
        if checked == 5 {
            break;
        }
    }
    assert_eq!(checked, 5);
}

#[test]
fn sigmoid_chain_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.insert("x", normal(&[5], 1.0, &mut rng)).unwrap();
    let r = grad_check(
        |g, p| {
            let x = g.param_from(p, "x")?;
            let a = g.sigmoid(x);
            let b = g.sigmoid(a);
            let c = g.sigmoid(b);
            Ok(g.sum(c))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn every_operator_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        for (op, err) in operator_suite(seed, 1e-6).unwrap() {
            assert!(err < 1e-4, "seed {seed} op {op}: {err}");
        }
    }
}

#[test]
fn momentum_free_sgd_is_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    p.insert("w", normal(&[3, 3], 1.0, &mut rng)).unwrap();
    let before = p.get("w").unwrap().clone();
    let mut g = Graph::new();
    let w = g.param_from(&p, "w").unwrap();
    let s = g.square(w);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    morphprint_autodiff::Sgd::new(0.05, 0.0, 0.0)
        .step(&mut p, &grads)
        .unwrap();
    for ((a, b), gr) in p
        .get("w")
        .unwrap()
        .data()
        .iter()
        .zip(before.data())
        .zip(grads.get("w").unwrap().data())
    {
        assert_eq!(*a, b - 0.05 * gr);
    }
}

proptest! {
    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = normal(&[2, 8, 8], 1.0, &mut rng);
            let k = normal(&[4, 2, 3, 3], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let kv = g.constant(k);
            let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
            let y = g.relu(y);
            let y = g.max_pool2(y).unwrap();
            let y = g.global_avg_pool(y).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn conv_output_size_formula(h in 3usize..12, w in 3usize..12, stride in 1usize..3, pad in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, h, w]));
        let k = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = g.conv2d(x, k, None, stride, pad).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[2, (h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1][..]);
    }
}
