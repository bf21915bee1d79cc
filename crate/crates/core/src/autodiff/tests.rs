use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Direct summation over (co, oy, ox, ci, ky, kx) with explicit bounds checks.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], geom: ConvGeom) -> Tensor {
    let (cin, h, wd) = x.chw().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = geom.out_extent(h, k).unwrap();
    let ow = geom.out_extent(wd, k).unwrap();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                            let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).unwrap()
}

fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(x.clone())?, g.leaf(w.clone())?, g.leaf(b.clone())?);
    let y = g.conv2d(xv, wv, Some(bv), geom)?;
    Ok(g.value(y).clone())
}

#[test]
fn conv_scalar_affine_example() {
    let out = run_conv(
        &t(&[1, 2, 2], &[1., 2., 3., 4.]),
        &t(&[1, 1, 1, 1], &[2.]),
        &t(&[1], &[1.]),
        ConvGeom::UNIT,
    )
    .unwrap();
    assert_eq!(out.data(), &[3., 5., 7., 9.]);
}

#[test]
fn conv_zero_weight_gives_bias_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 5, 5], &mut rng);
    let out = run_conv(&x, &Tensor::zeros(&[3, 2, 3, 3]), &t(&[3], &[0.5, -1., 2.]), ConvGeom::new(1, 1, 1)).unwrap();
    for (c, plane) in out.data().chunks(25).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -1., 2.][c]));
    }
}

#[test]
fn conv_ramp_average_matches_oracle() {
    let x = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let b = Tensor::zeros(&[1]);
    let geom = ConvGeom::new(1, 1, 1);
    let got = run_conv(&x, &w, &b, geom).unwrap();
    let want = conv_oracle(&x, &w, b.data(), geom);
    assert!(got.max_abs_diff(&want) < 1e-12);
    // centre pixel (1,1) averages 0,1,2,4,5,6,8,9,10
    assert!((got.data()[5] - 5.0).abs() < 1e-12);
}

#[test]
fn conv_matches_oracle_across_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..60 {
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let h = rng.random_range(3..=8);
        let w = rng.random_range(3..=8);
        let k = [1, 3][trial % 2];
        let geom = ConvGeom::new(rng.random_range(1..=2), rng.random_range(0..=2), rng.random_range(1..=2));
        if geom.out_extent(h, k).is_none() || geom.out_extent(w, k).is_none() {
            continue;
        }
        let x = rand_tensor(&[cin, h, w], &mut rng);
        let wt = rand_tensor(&[cout, cin, k, k], &mut rng);
        let b = rand_tensor(&[cout], &mut rng);
        let got = run_conv(&x, &wt, &b, geom).unwrap();
        let want = conv_oracle(&x, &wt, b.data(), geom);
        assert!(got.max_abs_diff(&want) < 1e-12, "trial {trial}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::zeros(&[2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    assert!(matches!(run_conv(&x, &w, &Tensor::zeros(&[1]), ConvGeom::UNIT), Err(Error::Shape { .. })));
    let w = Tensor::zeros(&[1, 2, 3, 3]);
    assert!(matches!(
        run_conv(&Tensor::zeros(&[2, 2, 2]), &w, &Tensor::zeros(&[1]), ConvGeom::UNIT),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn conv_is_linear_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[3, 6, 6], &mut rng);
    let y = rand_tensor(&[3, 6, 6], &mut rng);
    let w = rand_tensor(&[2, 3, 3, 3], &mut rng);
    let b = Tensor::zeros(&[2]);
    let (a, c) = (0.7, -1.3);
    let mix = Tensor::new(&[3, 6, 6], x.data().iter().zip(y.data()).map(|(p, q)| a * p + c * q).collect()).unwrap();
    let geom = ConvGeom::new(2, 1, 1);
    let lhs = run_conv(&mix, &w, &b, geom).unwrap();
    let (cx, cy) = (run_conv(&x, &w, &b, geom).unwrap(), run_conv(&y, &w, &b, geom).unwrap());
    let rhs = Tensor::new(lhs.shape(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + c * q).collect()).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2, 2], &[1., 3., 5., 7.])).unwrap();
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = rand_tensor(&[2, 2, 2], &mut rng);
    let x = g.leaf(r.clone()).unwrap();
    let p = g.global_avg_pool(x).unwrap();
    for c in 0..2 {
        let oracle = r.data()[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0;
        assert!((g.value(p).data()[c] - oracle).abs() < 1e-15);
    }
}

fn resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone()).unwrap();
    let y = g.bilinear_resize(v, oh, ow).unwrap();
    g.value(y).clone()
}

#[test]
fn resize_hand_example() {
    let out = resize(&t(&[1, 2, 2], &[0., 1., 0., 1.]), 4, 4);
    for row in out.data().chunks(4) {
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
    }
}

#[test]
fn resize_identity_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[3, 5, 7], &mut rng);
    assert_eq!(resize(&x, 5, 7), x);
    let c = Tensor::full(&[2, 3, 5], 0.3);
    let out = resize(&c, 8, 2);
    assert!(out.data().iter().all(|&v| v == 0.3));
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[4., 5.])).unwrap();
    let w = g.leaf(t(&[1, 2], &[1., 2.])).unwrap();
    let b = g.leaf(t(&[1], &[3.])).unwrap();
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[17.0]);

    let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
    let eye = g.leaf(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
    let y = g.linear(x, eye, None).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4., 5., 6.]);

    let zero = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let bias = g.leaf(t(&[2], &[7., -7.])).unwrap();
    let y = g.linear(x, zero, Some(bias)).unwrap();
    assert_eq!(g.value(y).data(), &[7., -7., 7., -7.]);

    let bad = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
    assert!(g.linear(x, bad, None).is_err());
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[-1., 0., 2.])).unwrap();
    let r = g.activation(x, Activation::Relu).unwrap();
    assert_eq!(g.value(r).data(), &[0., 0., 2.]);
    let l = g.activation(x, Activation::LeakyRelu(0.2)).unwrap();
    assert_eq!(g.value(l).data(), &[-0.2, 0., 2.]);
    let id = g.leaky_relu(x, 1.0).unwrap();
    assert_eq!(g.value(id).data(), g.value(x).data());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[0., 0.])).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.leaf(t(&[1], &[42.])).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[1.0]);
    let x = g.leaf(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
    let s = g.softmax(x).unwrap();
    for (got, want) in g.value(s).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((got - want).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 4), 1..6)) {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[n, 4], flat).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn resize_preserves_constants(c in -5.0f64..5.0, ih in 1usize..7, iw in 1usize..7, oh in 1usize..9, ow in 1usize..9) {
        let out = resize(&Tensor::full(&[1, ih, iw], c), oh, ow);
        prop_assert!(out.data().iter().all(|&v| (v - c).abs() <= 1e-15 * c.abs().max(1.0)));
    }
}

#[test]
fn backward_simple_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1., 2., 3.]).with_requires_grad()).unwrap();
    let w = g.constant(t(&[3], &[4., 5., 6.])).unwrap();
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4., 5., 6.]);
    assert!(g.grad(w).is_none());

    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[1.]).with_requires_grad()).unwrap();
    let n = g.scale(x, -1.0).unwrap();
    let r = g.relu(n).unwrap();
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1., 2.]).with_requires_grad()).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarBackward(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn composite_conv_pool_linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let lw = rand_tensor(&[2, 3], &mut rng);
    let x = rand_tensor(&[2, 5, 5], &mut rng);
    let err = grad_check(
        |g, x| {
            let w = g.constant(w.clone())?;
            let b = g.constant(b.clone())?;
            let lw = g.constant(lw.clone())?;
            let y = g.conv2d(x, w, Some(b), ConvGeom::new(1, 1, 1))?;
            let p = g.global_avg_pool(y)?;
            let o = g.linear(p, lw, None)?;
            let sq = g.mul(o, o)?;
            g.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_examples() {
    let err = grad_check(|g, x| {
        let sq = g.mul(x, x)?;
        g.sum(sq)
    }, &t(&[2], &[1., 2.]), 1e-5)
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let weights = t(&[3], &[0.3, -1.2, 2.0]);
    let err = grad_check(|g, x| {
        let s = g.softmax(x)?;
        let w = g.constant(weights.clone())?;
        let p = g.mul(s, w)?;
        g.sum(p)
    }, &t(&[3], &[0.1, 0.5, -0.4]), 1e-5)
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let err = grad_check(|g, x| {
        let r = g.relu(x)?;
        g.sum(r)
    }, &t(&[2], &[-1., -2.]), 1e-5)
    .unwrap();
    assert_eq!(err, 0.0);
}

/// Every differentiable operator against central differences at random non-kink points.
#[test]
fn every_operator_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = rand_tensor(&[2, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    let probe = rand_tensor(&[2, 3, 3], &mut rng);
    let checks: Vec<(&str, Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
        ("conv2d-input", rand_tensor(&[3, 6, 6], &mut rng), Box::new({
            let (w, b, probe) = (w.clone(), b.clone(), probe.clone());
            move |g: &mut Graph, x| {
                let w = g.constant(w.clone())?;
                let b = g.constant(b.clone())?;
                let y = g.conv2d(x, w, Some(b), ConvGeom::new(2, 1, 1))?;
                let p = g.constant(probe.clone())?;
                let m = g.mul(y, p)?;
                g.sum(m)
            }
        })),
        ("conv2d-weight-dilated", rand_tensor(&[2, 3, 3, 3], &mut rng), Box::new({
            let x = rand_tensor(&[3, 7, 7], &mut rng);
            move |g: &mut Graph, w| {
                let x = g.constant(x.clone())?;
                let y = g.conv2d(x, w, None, ConvGeom::new(1, 2, 2))?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }
        })),
        ("bilinear_resize", rand_tensor(&[2, 3, 5], &mut rng), Box::new({
            let probe = rand_tensor(&[2, 7, 4], &mut rng);
            move |g: &mut Graph, x| {
                let y = g.bilinear_resize(x, 7, 4)?;
                let p = g.constant(probe.clone())?;
                let m = g.mul(y, p)?;
                let sq = g.mul(m, m)?;
                g.sum(sq)
            }
        })),
        ("linear-weight", rand_tensor(&[3, 4], &mut rng), Box::new({
            let x = rand_tensor(&[2, 4], &mut rng);
            move |g: &mut Graph, w| {
                let x = g.constant(x.clone())?;
                let y = g.linear(x, w, None)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }
        })),
        ("matmul", rand_tensor(&[3, 4], &mut rng), Box::new({
            let b = rand_tensor(&[4, 2], &mut rng);
            move |g: &mut Graph, a| {
                let b = g.constant(b.clone())?;
                let bt = g.transpose(b)?;
                let m = g.matmul(a, b)?;
                let m2 = g.matmul(m, bt)?;
                let sq = g.mul(m2, m2)?;
                g.sum(sq)
            }
        })),
        ("leaky_relu-softmax", Tensor::new(&[2, 3], vec![0.3, -0.7, 1.1, -0.2, 0.9, -1.4]).unwrap(), Box::new(|g: &mut Graph, x| {
            let l = g.leaky_relu(x, 0.2)?;
            let s = g.softmax(l)?;
            let w = g.constant(Tensor::new(&[2, 3], vec![1., -2., 0.5, 3., 0.1, -1.]).unwrap())?;
            let m = g.mul(s, w)?;
            g.sum(m)
        })),
        ("pair_logits-vector", rand_tensor(&[6], &mut rng), Box::new({
            let h = rand_tensor(&[3, 3], &mut rng);
            move |g: &mut Graph, a| {
                let h = g.constant(h.clone())?;
                let l = g.pair_logits(h, a)?;
                let s = g.softmax(l)?;
                let sq = g.mul(s, l)?;
                g.sum(sq)
            }
        })),
        ("pair_logits-nodes", rand_tensor(&[3, 2], &mut rng), Box::new({
            let a = rand_tensor(&[4], &mut rng);
            move |g: &mut Graph, h| {
                let a = g.constant(a.clone())?;
                let l = g.pair_logits(h, a)?;
                let sq = g.mul(l, l)?;
                g.sum(sq)
            }
        })),
        ("channel_scale-stack-row", rand_tensor(&[2, 3], &mut rng), Box::new({
            let k = rand_tensor(&[3, 2, 2], &mut rng);
            move |g: &mut Graph, e| {
                let k = g.constant(k.clone())?;
                let r0 = g.row(e, 0)?;
                let r1 = g.row(e, 1)?;
                let a = g.channel_scale(k, r0)?;
                let b = g.channel_scale(k, r1)?;
                let st = g.stack(&[a, b])?;
                let flat = g.reshape(st, &[24])?;
                let sq = g.mul(flat, flat)?;
                g.sum(sq)
            }
        })),
        ("power_normalize", rand_tensor(&[2, 2, 2], &mut rng), Box::new({
            let probe = rand_tensor(&[2, 2, 2], &mut rng);
            move |g: &mut Graph, x| {
                let (y, _) = g.power_normalize(x, 2.0)?;
                let p = g.constant(probe.clone())?;
                let m = g.mul(y, p)?;
                g.sum(m)
            }
        })),
        ("cross_entropy", rand_tensor(&[3, 2, 2], &mut rng), Box::new(|g: &mut Graph, x| {
            g.cross_entropy(x, &[0, 2, IGNORE_LABEL, 1])
        })),
        ("l1", Tensor::new(&[4], vec![0.3, -0.2, 1.5, 0.9]).unwrap(), Box::new(|g: &mut Graph, x| {
            g.l1_loss(x, &Tensor::new(&[4], vec![0.0, 0.1, 1.0, 2.0]).unwrap(), Some(&[true, true, false, true]))
        })),
        ("cosine", rand_tensor(&[3, 2, 2], &mut rng), Box::new({
            let target = rand_tensor(&[3, 2, 2], &mut rng);
            move |g: &mut Graph, x| g.cosine_loss(x, &target)
        })),
        ("mean-add-scale", rand_tensor(&[5], &mut rng), Box::new(|g: &mut Graph, x| {
            let s = g.scale(x, 3.0)?;
            let a = g.add(s, x)?;
            let noise = Tensor::full(&[5], 0.25);
            let n = g.add_const(a, &noise)?;
            let sq = g.mul(n, n)?;
            g.mean(sq)
        })),
    ];
    for (name, point, f) in checks {
        let err = grad_check(|g, x| f(g, x), &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn nonfinite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[1e300])).unwrap();
    let y = g.mul(x, x);
    assert!(matches!(y, Err(Error::NonFinite { .. })));
}

#[test]
fn cross_entropy_all_ignored_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 1, 2])).unwrap();
    assert!(g.cross_entropy(x, &[IGNORE_LABEL, IGNORE_LABEL]).is_err());
}

#[test]
fn power_normalize_degenerate_passthrough() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[4])).unwrap();
    let (y, s) = g.power_normalize(x, 1.0).unwrap();
    assert!(s.degenerate);
    assert_eq!(g.value(y).data(), &[0.0; 4]);
}

#[test]
fn fault_hook_perturbs_leaf_gradients() {
    set_backward_fault(true);
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[2.0]).with_requires_grad()).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    set_backward_fault(false);
    assert!((g.grad(x).unwrap()[0] - 1.05).abs() < 1e-15);
}

#[test]
fn flop_counter_tracks_stage() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 4, 4])).unwrap();
    let w = g.leaf(Tensor::zeros(&[3, 2, 1, 1])).unwrap();
    g.conv2d(x, w, None, ConvGeom::UNIT).unwrap();
    assert!(g.flop_counts().is_empty());
    g.set_flop_stage(Some("conv"));
    g.conv2d(x, w, None, ConvGeom::UNIT).unwrap();
    g.set_flop_stage(Some("resize"));
    g.bilinear_resize(x, 2, 2).unwrap();
    assert_eq!(g.flop_counts()["conv"], 3 * 2 * 16);
    assert_eq!(g.flop_counts()["resize"], 9 * 2 * 4);
}
