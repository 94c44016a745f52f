use bridgeseg::tensor::gradcheck::{grad_check, grad_check_inputs, DEFAULT_EPS};
use bridgeseg::tensor::Conv2dSpec;
use bridgeseg::{Error, Graph64, Tensor64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor64::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Φ by Simpson integration of the normal density from 0 to x.
fn normal_cdf(x: f64) -> f64 {
    let steps = 2000;
    let h = x / steps as f64;
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..steps {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

// ------------------------------------------------------------------ matmul

#[test]
fn matmul_identity_and_known_product() {
    let mut g = Graph64::new();
    let i = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = g.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = g.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
    let y = g.matmul(a, b).unwrap();
    let oracle = triple_loop(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
    assert_eq!(g.value(y), oracle.as_slice());
    assert_eq!(g.value(y), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shapes_and_errors() {
    let mut g = Graph64::new();
    let a = g.leaf(&random(&[2, 3], 1)).unwrap();
    let b = g.leaf(&random(&[3, 5], 2)).unwrap();
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(y), &[2, 5]);
    let bad = g.leaf(&random(&[4, 5], 3)).unwrap();
    let err = g.matmul(a, bad).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn batched_matmul_matches_oracle() {
    let a = random(&[3, 4, 5], 4);
    let b = random(&[3, 5, 2], 5);
    let mut g = Graph64::new();
    let (av, bv) = (g.leaf(&a).unwrap(), g.leaf(&b).unwrap());
    let y = g.matmul(av, bv).unwrap();
    for batch in 0..3 {
        let o = triple_loop(&a.data()[batch * 20..][..20], &b.data()[batch * 10..][..10], 4, 5, 2);
        for (x, e) in g.value(y)[batch * 8..][..8].iter().zip(&o) {
            assert!((x - e).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let report = grad_check_inputs(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        },
        &[random(&[3, 4], 6), random(&[4, 2], 7)],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

// ------------------------------------------------------------------ conv2d

fn naive_conv(x: &Tensor64, w: &Tensor64, stride: usize, pad: usize, groups: usize) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = o / groups;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let grp = oc / opg;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..cg {
                        let ci = grp * cg + ic;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * cg + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[1, 1, 5, 5], 8);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let w = g.leaf(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let y = g.conv2d(xv, w, None, Conv2dSpec::new(1, 0, 1)).unwrap();
    assert_eq!(g.value(y), x.data());
}

#[test]
fn conv_ones_kernel_gives_neighbourhood_sums() {
    let ramp: Vec<f64> = (0..16).map(f64::from).collect();
    let x = t(&[1, 1, 4, 4], &ramp);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let w = g.leaf(&t(&[1, 1, 3, 3], &[1.0; 9])).unwrap();
    let y = g.conv2d(xv, w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
    // Hand-computed neighbourhood sums for the 4×4 ramp.
    let mut expect = vec![0.0; 16];
    for r in 0..4i32 {
        for c in 0..4i32 {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..4).contains(&rr) && (0..4).contains(&cc) {
                        expect[(r * 4 + c) as usize] += ramp[(rr * 4 + cc) as usize];
                    }
                }
            }
        }
    }
    assert_eq!(g.value(y), expect.as_slice());
    assert_eq!(g.value(y)[0], 0.0 + 1.0 + 4.0 + 5.0);
}

#[test]
fn conv_matches_naive_oracle_across_geometries() {
    for (seed, (c, o, k, s, p, groups)) in [
        (3, 4, 3, 1, 1, 1),
        (4, 4, 3, 2, 1, 2),
        (3, 8, 7, 4, 3, 1),
        (6, 6, 3, 1, 1, 6),
        (2, 4, 2, 2, 0, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let x = random(&[2, c, 8, 8], 10 + seed as u64);
        let w = random(&[o, c / groups, k, k], 20 + seed as u64);
        let (shape, oracle) = naive_conv(&x, &w, s, p, groups);
        let mut g = Graph64::new();
        let (xv, wv) = (g.leaf(&x).unwrap(), g.leaf(&w).unwrap());
        let y = g.conv2d(xv, wv, None, Conv2dSpec::new(s, p, groups)).unwrap();
        assert_eq!(g.shape(y), shape.as_slice());
        for (a, b) in g.value(y).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn depthwise_shape_and_group_errors() {
    let mut g = Graph64::new();
    let x = g.leaf(&random(&[1, 8, 16, 16], 30)).unwrap();
    let w = g.leaf(&random(&[8, 1, 3, 3], 31)).unwrap();
    let y = g.conv2d(x, w, None, Conv2dSpec::new(1, 1, 8)).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 16, 16]);

    let w3 = g.leaf(&random(&[6, 1, 3, 3], 32)).unwrap();
    let err = g.conv2d(x, w3, None, Conv2dSpec::new(1, 1, 3)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn conv_gradients() {
    let report = grad_check_inputs(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1, 2))?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        },
        &[random(&[1, 4, 5, 5], 33), random(&[4, 2, 3, 3], 34), random(&[4], 35)],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

// ------------------------------------------------------------------ layernorm / softmax / gelu

#[test]
fn layernorm_examples() {
    let mut g = Graph64::new();
    let gamma = g.leaf(&Tensor64::ones(&[4])).unwrap();
    let beta = g.leaf(&Tensor64::zeros(&[4])).unwrap();
    let x = g.leaf(&t(&[1, 4], &[5.0; 4])).unwrap();
    let y = g.layernorm(x, gamma, beta, 1e-6).unwrap();
    assert_eq!(g.value(y), &[0.0; 4]);

    let gamma = g.leaf(&Tensor64::ones(&[2])).unwrap();
    let beta = g.leaf(&Tensor64::zeros(&[2])).unwrap();
    let x = g.leaf(&t(&[2], &[1.0, 3.0])).unwrap();
    let y = g.layernorm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-9 && (g.value(y)[1] - 1.0).abs() < 1e-9);
}

#[test]
fn layernorm_rows_are_standardized() {
    let x = random(&[5, 16], 40);
    let mut g = Graph64::new();
    let gamma = g.leaf(&Tensor64::ones(&[16])).unwrap();
    let beta = g.leaf(&Tensor64::zeros(&[16])).unwrap();
    let xv = g.leaf(&x).unwrap();
    let y = g.layernorm(xv, gamma, beta, 1e-6).unwrap();
    for row in g.value(y).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn layernorm_composite_gradient() {
    let report = grad_check_inputs(
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
            let w = g.mul(y, v[3])?;
            g.sum(w)
        },
        &[random(&[3, 6], 41), random(&[6], 42), random(&[6], 43), random(&[3, 6], 44)],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph64::new();
    let x = g.leaf(&t(&[2], &[0.0, 0.0])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, want) in [0.09003, 0.24473, 0.66524].into_iter().enumerate() {
        let direct = (i as f64 + 1.0).exp() / z;
        assert!((g.value(y)[i] - direct).abs() < 1e-15);
        assert!((g.value(y)[i] - want).abs() < 5e-6);
    }

    let shifted = g.leaf(&t(&[3], &[101.0, 102.0, 103.0])).unwrap();
    let ys = g.softmax(shifted, 0).unwrap();
    for (a, b) in g.value(y).iter().zip(g.value(ys)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gelu_examples() {
    let mut g = Graph64::new();
    let x = g.leaf(&t(&[5], &[0.0, 1.0, 6.0, -6.0, -1.0])).unwrap();
    let y = g.gelu(x).unwrap();
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - normal_cdf(1.0)).abs() < 1e-9);
    assert!((v[1] - 0.84134).abs() < 5e-6);
    assert!((v[2] - 6.0).abs() < 1e-7 && v[3].abs() < 1e-7);
    assert!((v[4] - -(1.0 - normal_cdf(1.0))).abs() < 1e-9);
}

#[test]
fn elementwise_gradients() {
    let x = random(&[2, 3, 4], 50);
    type Case = fn(&mut Graph64, bridgeseg::Var) -> bridgeseg::Result<bridgeseg::Var>;
    let cases: [(&str, Case); 6] = [
        ("gelu", |g: &mut Graph64, v| {
            let y = g.gelu(v)?;
            g.sum(y)
        }),
        ("softmax", |g: &mut Graph64, v| {
            let y = g.softmax(v, 1)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }),
        ("log_softmax", |g: &mut Graph64, v| {
            let y = g.log_softmax(v, 2)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }),
        ("permute", |g: &mut Graph64, v| {
            let y = g.permute(v, &[2, 0, 1])?;
            let w = g.constant(&[4, 2, 3], (0..24).map(f64::from).collect())?;
            let y = g.mul(y, w)?;
            g.sum(y)
        }),
        ("sum_axis", |g: &mut Graph64, v| {
            let y = g.sum_axis(v, 1)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        }),
        ("div", |g: &mut Graph64, v| {
            let d = g.add_scalar(v, 3.0)?;
            let y = g.div(v, d)?;
            g.sum(y)
        }),
    ];
    for (name, f) in cases {
        let err = grad_check(f, &x, DEFAULT_EPS).unwrap();
        assert!(err <= 1e-6, "{name}: {err}");
    }
}

// ------------------------------------------------------------------ layout ops

#[test]
fn reshape_concat_split() {
    let x = t(&[2, 6], &(0..12).map(f64::from).collect::<Vec<_>>());
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let r = g.reshape(xv, &[3, 4]).unwrap();
    assert_eq!(g.value(r), x.data());
    assert!(matches!(g.reshape(xv, &[5, 2]), Err(Error::Shape { .. })));

    let a = g.leaf(&random(&[3, 4], 60)).unwrap();
    let b = g.leaf(&random(&[5, 4], 61)).unwrap();
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.shape(c), &[8, 4]);
    let parts = g.split(c, 0, &[3, 5]).unwrap();
    assert_eq!(g.value(parts[0]), g.value(a));
    assert_eq!(g.value(parts[1]), g.value(b));
    assert!(g.split(c, 0, &[3, 4]).is_err());
}

// ------------------------------------------------------------------ backward

#[test]
fn backward_examples() {
    let x = t(&[3], &[1.0, 2.0, 3.0]).with_grad();
    let unused = t(&[2], &[1.0, 1.0]).with_grad();
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let _uv = g.leaf(&unused).unwrap();
    let sq = g.mul(xv, xv).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);

    let mut p = unused.clone();
    p.requires_grad = true;
    let mut q = unused;
    g.store_grad(&mut q).unwrap();
    assert_eq!(q.grad().unwrap(), &[0.0, 0.0]);
    // A clone is a distinct tensor: not part of this graph, also zeros.
    g.store_grad(&mut p).unwrap();
    assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_contract_errors() {
    let x = random(&[3], 70).with_grad();
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    assert!(matches!(g.backward(xv), Err(Error::Contract(_))));
    let s = g.sum(xv).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph64::new();
    let a = g.leaf(&t(&[2], &[1.0, 0.0])).unwrap();
    let b = g.leaf(&t(&[2], &[0.0, 0.0])).unwrap();
    assert!(matches!(g.div(a, b), Err(Error::NonFinite { .. })));
    assert!(Tensor64::new(&[2], vec![1.0]).is_err());
}

// ------------------------------------------------------------------ properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-1e3f64..1e3, 12)) {
        let mut g = Graph64::new();
        let x = g.leaf(&t(&[3, 4], &v)).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn layernorm_rows_have_zero_mean(v in prop::collection::vec(-1e3f64..1e3, 8)) {
        prop_assume!(v[..4].iter().any(|a| (a - v[0]).abs() > 1e-3));
        prop_assume!(v[4..].iter().any(|a| (a - v[4]).abs() > 1e-3));
        let mut g = Graph64::new();
        let gamma = g.leaf(&Tensor64::ones(&[4])).unwrap();
        let beta = g.leaf(&Tensor64::zeros(&[4])).unwrap();
        let x = g.leaf(&t(&[2, 4], &v)).unwrap();
        let y = g.layernorm(x, gamma, beta, 1e-6).unwrap();
        for row in g.value(y).chunks(4) {
            prop_assert!(row.iter().sum::<f64>().abs() / 4.0 < 1e-6);
        }
    }

    #[test]
    fn layout_round_trips_are_exact(
        v in prop::collection::vec(-1e3f64..1e3, 24),
        cut in 1usize..4,
    ) {
        let x = t(&[4, 6], &v);
        let mut g = Graph64::new();
        let xv = g.leaf(&x).unwrap();
        let parts = g.split(xv, 0, &[cut, 4 - cut]).unwrap();
        let back = g.concat(&parts, 0).unwrap();
        prop_assert_eq!(g.value(back), x.data());
        let r = g.reshape(xv, &[2, 3, 4]).unwrap();
        let r = g.reshape(r, &[4, 6]).unwrap();
        prop_assert_eq!(g.value(r), x.data());
        let p = g.permute(xv, &[1, 0]).unwrap();
        let p = g.permute(p, &[1, 0]).unwrap();
        prop_assert_eq!(g.value(p), x.data());
    }

    #[test]
    fn moderate_inputs_stay_finite(v in prop::collection::vec(-1e3f64..1e3, 6)) {
        let mut g = Graph64::new();
        let x = g.leaf(&t(&[2, 3], &v)).unwrap();
        let a = g.gelu(x).unwrap();
        let b = g.log_softmax(x, 1).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for v in [a, b, s] {
            prop_assert!(g.value(v).iter().all(|z| z.is_finite()));
        }
    }
}
