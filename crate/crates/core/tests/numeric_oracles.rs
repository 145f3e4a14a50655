//! Loop-level reference implementations checked against the engine kernels.

use eimcil::numeric::{self, grad_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn random(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops, zero padding by bounds check.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (m, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; m * oh * ow];
    for o in 0..m {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * c + ci) * ks + ky) * ks + kx]
                                * x.data()[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn naive_depthwise(x: &Tensor, k: &Tensor, b: &Tensor, mult: usize) -> Vec<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (count, ks) = (k.shape()[0], k.shape()[1]);
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; count * h * w];
    for j in 0..count {
        let ch = j / mult;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[j];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = y as isize + ky as isize - r;
                        let ix = xx as isize + kx as isize - r;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc += k.data()[(j * ks + ky) * ks + kx]
                            * x.data()[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
                out[(j * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let out = numeric::conv2d(&x, &k, &b, 1, 1).unwrap();
    assert_eq!(out.shape(), [3, 5, 5]);
    assert!(max_diff(out.data(), &naive_conv(&x, &k, &b, 1, 1)) < 1e-12);

    // strided, unpadded, non-square input
    let x = random(&[3, 7, 6], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let out = numeric::conv2d(&x, &k, &b, 2, 0).unwrap();
    assert!(max_diff(out.data(), &naive_conv(&x, &k, &b, 2, 0)) < 1e-12);
}

#[test]
fn depthwise_matches_loop_oracle() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let x = random(&[3, 6, 5], &mut rng);
    let k = random(&[3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let out = numeric::depthwise_conv2d(&x, &k, &b, 1).unwrap();
    assert!(max_diff(out.data(), &naive_depthwise(&x, &k, &b, 1)) < 1e-12);

    let k = random(&[6, 3, 3], &mut rng);
    let b = random(&[6], &mut rng);
    let out = numeric::depthwise_conv2d(&x, &k, &b, 2).unwrap();
    assert!(max_diff(out.data(), &naive_depthwise(&x, &k, &b, 2)) < 1e-12);
}

#[test]
fn linear_matches_dot_product_oracle() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let x = random(&[4], &mut rng);
    let w = random(&[3, 4], &mut rng);
    let b = random(&[3], &mut rng);
    let out = numeric::linear(&x, &w, &b).unwrap();
    let expected: Vec<f64> = (0..3)
        .map(|r| (0..4).map(|c| w.data()[r * 4 + c] * x.data()[c]).sum::<f64>() + b.data()[r])
        .collect();
    assert!(max_diff(out.data(), &expected) < 1e-12);
}

#[test]
fn cross_entropy_direct_evaluation() {
    let logits = [2.0f64, 1.0, 0.0];
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let expected = -(logits[0].exp() / z).ln();
    let ce = numeric::cross_entropy(&logits, 0).unwrap();
    assert!((ce - expected).abs() < 1e-15);
    assert!((ce - 0.4076).abs() < 5e-5);
}

fn trainable(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor {
    random(shape, rng).trainable(true)
}

#[test]
fn linear_passes_grad_check() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let x = random(&[5], &mut rng);
    let mut params = vec![trainable(&[3, 5], &mut rng), trainable(&[3], &mut rng)];
    let report = grad_check(&mut params, 1e-5, |tape, v| {
        let xv = tape.constant(x.clone())?;
        let y = tape.linear(xv, v[0], v[1])?;
        tape.cross_entropy(y, 1)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn conv2d_passes_grad_check() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let target = random(&[3, 3, 3], &mut rng);
    let mut params = vec![
        trainable(&[2, 6, 5], &mut rng),
        trainable(&[3, 2, 3, 3], &mut rng),
        trainable(&[3], &mut rng),
    ];
    let report = grad_check(&mut params, 1e-5, |tape, v| {
        let y = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
        let t = tape.constant(target.clone())?;
        let p = tape.mul(y, t)?;
        tape.sum(p)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn depthwise_relu_pool_pass_grad_check() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
    let mut params = vec![
        trainable(&[2, 5, 5], &mut rng),
        trainable(&[4, 3, 3], &mut rng),
        trainable(&[4], &mut rng),
        trainable(&[4, 1, 1], &mut rng),
        trainable(&[4], &mut rng),
    ];
    let report = grad_check(&mut params, 1e-5, |tape, v| {
        let a = tape.depthwise_conv2d(v[0], v[1], v[2], 2)?;
        let b = tape.depthwise_conv2d(v[0], v[3], v[4], 2)?;
        let s = tape.add(a, b)?;
        let cat = tape.concat(&[v[0], s])?;
        let r = tape.relu(cat)?;
        let p = tape.global_avg_pool(r)?;
        tape.cross_entropy(p, 3)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn l2_distance_passes_grad_check() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let mut params = vec![trainable(&[6], &mut rng), trainable(&[6], &mut rng)];
    let report = grad_check(&mut params, 1e-5, |tape, v| {
        let d = tape.l2_distance(v[0], v[1])?;
        tape.scale(d, 3.0)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = random(&[2, 5, 4], &mut rng);
        let y = random(&[2, 5, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[3]);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = numeric::conv2d(&Tensor::new(&[2, 5, 4], mix).unwrap(), &k, &zero, 1, 1).unwrap();
        let cx = numeric::conv2d(&x, &k, &zero, 1, 1).unwrap();
        let cy = numeric::conv2d(&y, &k, &zero, 1, 1).unwrap();
        let rhs: Vec<f64> = cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_diff(lhs.data(), &rhs) < 1e-10);
    }

    #[test]
    fn conv_is_linear_in_kernel(seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = random(&[3, 6, 6], &mut rng);
        let k1 = random(&[2, 3, 3, 3], &mut rng);
        let k2 = random(&[2, 3, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[2]);
        let ksum = Tensor::new(
            &[2, 3, 3, 3],
            k1.data().iter().zip(k2.data()).map(|(p, q)| p + q).collect(),
        ).unwrap();
        let lhs = numeric::conv2d(&x, &ksum, &zero, 1, 1).unwrap();
        let a = numeric::conv2d(&x, &k1, &zero, 1, 1).unwrap();
        let b = numeric::conv2d(&x, &k2, &zero, 1, 1).unwrap();
        let rhs: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
        prop_assert!(max_diff(lhs.data(), &rhs) < 1e-10);

        // same property for the depthwise kernels fusion relies on
        let y = random(&[2, 5, 5], &mut rng);
        let d1 = random(&[2, 3, 3], &mut rng);
        let d2 = random(&[2, 3, 3], &mut rng);
        let dsum = Tensor::new(
            &[2, 3, 3],
            d1.data().iter().zip(d2.data()).map(|(p, q)| p + q).collect(),
        ).unwrap();
        let lhs = numeric::depthwise_conv2d(&y, &dsum, &zero, 1).unwrap();
        let a = numeric::depthwise_conv2d(&y, &d1, &zero, 1).unwrap();
        let b = numeric::depthwise_conv2d(&y, &d2, &zero, 1).unwrap();
        let rhs: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
        prop_assert!(max_diff(lhs.data(), &rhs) < 1e-10);
    }

    #[test]
    fn cross_entropy_nonnegative_with_zero_sum_gradient(
        logits in prop::collection::vec(-20.0f64..20.0, 2..8),
        pick in any::<prop::sample::Index>(),
    ) {
        let label = pick.index(logits.len());
        let t = Tensor::vector(logits).unwrap().trainable(true);
        let mut tape = Tape::new();
        let lv = tape.param(&t).unwrap();
        let ce = tape.cross_entropy(lv, label).unwrap();
        prop_assert!(tape.value(ce).item() >= 0.0);
        let grads = tape.backward(ce).unwrap();
        let total: f64 = grads.get(lv).unwrap().iter().sum();
        prop_assert!(total.abs() < 1e-12);
    }
}
