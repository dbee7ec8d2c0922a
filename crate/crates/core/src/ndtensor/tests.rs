use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TOL: f64 = 1e-4;
const H: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so relu and log stay off their kinks.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if positive || rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

const SHAPES: [&[usize]; 3] = [&[1, 1], &[3, 4], &[5, 2]];

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, params: &[Tensor<f64>]) {
    let err = grad_check(f, params, H).unwrap();
    assert!(err <= TOL, "grad_check error {err:e}");
}

#[test]
fn square_has_gradient_six_at_three() {
    let x = Tensor::scalar(3.0);
    let err = grad_check(
        |g, v| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        },
        std::slice::from_ref(&x),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6);
    let mut g = Graph::new();
    let v = g.param(x);
    let s = g.square(v);
    let out = g.sum(s);
    assert!((g.backward(out).unwrap().get(v).unwrap().item() - 6.0).abs() < 1e-12);
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let z = g.scale(p, 0.0);
    let s = g.add(z, c).unwrap();
    let out = g.sum(s);
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.get(p).unwrap().item(), 0.0);
}

#[test]
fn sigmoid_layer_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_t(&mut rng, &[4, 3]);
    let x = rand_t(&mut rng, &[3, 1]);
    check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let s = g.sigmoid(h);
            Ok(g.sum(s))
        },
        &[w, x],
    );
}

#[test]
fn grad_check_reports_non_finite_loss() {
    let r = grad_check(
        |g, v| {
            let l = g.log(v[0]);
            Ok(g.sum(l))
        },
        &[Tensor::scalar(-1.0)],
        1e-4,
    );
    assert!(r.is_err());
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for shape in SHAPES {
        let a = rand_t(&mut rng, shape);
        let b = rand_t(&mut rng, shape);
        check(
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[1])?;
                let d = g.sub(d, v[1])?;
                let m = g.mul(d, v[0])?;
                let m = g.mul(m, v[1])?;
                Ok(g.sum(m))
            },
            &[a, b],
        );
    }
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shape in SHAPES {
        let a = rand_away(&mut rng, shape, false);
        let p = rand_away(&mut rng, shape, true);
        check(
            |g, v| {
                let e = g.exp(v[0]);
                let s = g.sin(v[0]);
                let sp = g.softplus(v[0]);
                let sg = g.sigmoid(v[0]);
                let r = g.relu(v[0]);
                let l = g.log(v[1]);
                let sc = g.scale(l, 1.7);
                let sc = g.add_scalar(sc, 0.3);
                let sq = g.square(sc);
                let mut acc = g.mul(e, s)?;
                for t in [sp, sg, r, sq] {
                    let m = g.mul(acc, t)?;
                    acc = g.add(acc, m)?;
                }
                Ok(g.mean(acc))
            },
            &[a, p],
        );
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for shape in [&[2usize, 3][..], &[4, 4], &[5, 2]] {
        let a = rand_t(&mut rng, shape);
        let (r, c) = (shape[0], shape[1]);
        let bias = rand_t(&mut rng, &[r]);
        let s = rand_t(&mut rng, &[1]);
        check(
            |g, v| {
                let t = g.transpose(v[0])?;
                let t = g.add_row(t, v[1])?;
                let t = g.mul_scalar_var(t, v[2])?;
                let re = g.reshape(t, &[r * c])?;
                let re = g.reshape(re, &[c, r])?;
                let gathered = g.gather_rows(re, &[c - 1, 0, c - 1])?;
                let sliced = g.slice_cols(gathered, 0, r.min(2))?;
                let both = g.concat_cols(&[sliced, gathered])?;
                let sq = g.square(both);
                Ok(g.sum(sq))
            },
            &[a, bias, s],
        );
    }
}

#[test]
fn matmul_and_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (m, k, n) in [(1, 1, 1), (3, 4, 2), (6, 3, 5)] {
        let x = rand_t(&mut rng, &[m, k]);
        let w = rand_t(&mut rng, &[k, n]);
        let b = rand_t(&mut rng, &[n]);
        check(
            |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            },
            &[x, w, b],
        );
    }
}

#[test]
fn convolution_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ConvSpec::default();
    for (b, ci, co, s) in [(1, 1, 2, 4), (2, 2, 3, 5), (3, 1, 1, 6)] {
        let x = rand_t(&mut rng, &[b, ci, s, s]);
        let w = rand_t(&mut rng, &[co, ci, 3, 3]);
        let bias = rand_t(&mut rng, &[co]);
        let wt = rand_t(&mut rng, &[co, ci, 3, 3]);
        let bt = rand_t(&mut rng, &[ci]);
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], spec)?;
                let y = g.sigmoid(y);
                let back = g.conv_transpose2d(y, v[3], v[4], spec, (s, s))?;
                let sq = g.square(back);
                Ok(g.sum(sq))
            },
            &[x, w, bias, wt, bt],
        );
    }
}

#[test]
fn conv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = ConvSpec::default();
    let x = rand_t(&mut rng, &[2, 3, 7, 7]);
    let w = rand_t(&mut rng, &[4, 3, 3, 3]);
    let b = rand_t(&mut rng, &[4]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 4]);
    let yv = g.value(y).clone();
    for s in 0..2 {
        for co in 0..4 {
            for oh in 0..4 {
                for ow in 0..4 {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for u in 0..3 {
                            for v in 0..3 {
                                let ih = (oh * 2 + u) as isize - 1;
                                let iw = (ow * 2 + v) as isize - 1;
                                if ih < 0 || iw < 0 || ih >= 7 || iw >= 7 {
                                    continue;
                                }
                                acc += w.data()[((co * 3 + ci) * 3 + u) * 3 + v]
                                    * x.data()[((s * 3 + ci) * 7 + ih as usize) * 7 + iw as usize];
                            }
                        }
                    }
                    let got = yv.data()[((s * 4 + co) * 4 + oh) * 4 + ow];
                    assert!((got - acc).abs() < 1e-13);
                }
            }
        }
    }
}

#[test]
fn transpose_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> with zero biases.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = ConvSpec::default();
    let x = rand_t(&mut rng, &[2, 3, 8, 8]);
    let w = rand_t(&mut rng, &[5, 3, 3, 3]);
    let y = rand_t(&mut rng, &[2, 5, 4, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let z5 = g.constant(Tensor::zeros(&[5]));
    let z3 = g.constant(Tensor::zeros(&[3]));
    let yv = g.constant(y.clone());
    let cx = g.conv2d(xv, wv, z5, spec).unwrap();
    let ty = g.conv_transpose2d(yv, wv, z3, spec, (8, 8)).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
}

#[test]
fn concat_channels_and_row_kron() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (n, m, q) in [(1, 1, 1), (3, 2, 4), (5, 3, 2)] {
        let a = rand_t(&mut rng, &[n, m]);
        let b = rand_t(&mut rng, &[n, q]);
        let c1 = rand_t(&mut rng, &[n, 1, 2, 2]);
        let c2 = rand_t(&mut rng, &[n, 2, 2, 2]);
        check(
            |g, v| {
                let k = g.row_kron(v[0], v[1])?;
                let k = g.square(k);
                let s1 = g.sum(k);
                let cc = g.concat_channels(&[v[2], v[3]])?;
                let cc = g.sin(cc);
                let s2 = g.sum(cc);
                let w = g.mul(s1, s2)?;
                g.add(w, s1)
            },
            &[a, b, c1, c2],
        );
    }
    // ordering: x index outer, view index inner
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![3.0, 5.0]]));
    let k = g.row_kron(a, b).unwrap();
    assert_eq!(g.value(k).data(), &[3.0, 5.0, 6.0, 10.0]);
}

#[test]
fn dense_gp_nll_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (n, l) in [(1, 1), (4, 2), (6, 3)] {
        let z = rand_t(&mut rng, &[n, l]);
        let f = rand_t(&mut rng, &[n, n]);
        check(
            |g, v| {
                let ft = g.transpose(v[1])?;
                let k = g.matmul(v[1], ft)?;
                let eye = g.constant(Tensor::eye(n));
                let k = g.add(k, eye)?;
                g.dense_gp_nll(v[0], k)
            },
            &[z, f],
        );
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_t(&mut rng, &[16, 2, 9, 9]);
    let w = rand_t(&mut rng, &[3, 2, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(Tensor::zeros(&[3]));
        let y = g.conv2d(xv, wv, bv, ConvSpec::default()).unwrap();
        let y = g.square(y);
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        (g.value(s).clone(), gr.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}
