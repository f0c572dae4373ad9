mod common;

use common::{max_abs_diff, random, rng};
use stan_core::tensor::gradcheck;
use stan_core::{Tape, Tensor, TensorError, Var};

/// Direct cross-correlation, loop per output element.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor<f64> {
    let (ci, t, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, kt, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    assert_eq!(ci / groups, cig);
    let ot = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = Tensor::zeros(&[co, ot, oh, ow]);
    let cog = co / groups;
    for o in 0..co {
        for a in 0..ot {
            for bb in 0..oh {
                for c in 0..ow {
                    let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
                    for il in 0..cig {
                        let i = (o / cog) * cig + il;
                        for p in 0..kt {
                            for q in 0..kh {
                                for r in 0..kw {
                                    let ti = (a * stride[0] + p) as isize - pad[0] as isize;
                                    let hi = (bb * stride[1] + q) as isize - pad[1] as isize;
                                    let wi = (c * stride[2] + r) as isize - pad[2] as isize;
                                    if ti < 0
                                        || hi < 0
                                        || wi < 0
                                        || ti >= t as isize
                                        || hi >= h as isize
                                        || wi >= wd as isize
                                    {
                                        continue;
                                    }
                                    acc += w.get(&[o, il, p, q, r])
                                        * x.get(&[i, ti as usize, hi as usize, wi as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, a, bb, c], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_stem_shape() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 16, 64, 64]));
    let w = tape.constant(Tensor::zeros(&[64, 3, 3, 4, 4]));
    let y = tape.conv3d(x, w, None, [2, 4, 4], [1, 0, 0], 1).unwrap();
    assert_eq!(tape.shape(y), &[64, 8, 16, 16]);
}

#[test]
fn conv3d_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.37));
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = tape.conv3d(x, w, None, [1, 1, 1], [0, 0, 0], 1).unwrap();
    assert_eq!(tape.value(y).data(), &[0.37]);
}

#[test]
fn conv3d_matches_direct_oracle() {
    let mut r = rng(11);
    let x = random::<f64>(&[2, 4, 5, 5], &mut r);
    let w = random::<f64>(&[3, 2, 2, 3, 3], &mut r);
    let b = random::<f64>(&[3], &mut r);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv3d(xv, wv, Some(bv), [1, 2, 2], [0, 1, 1], 1).unwrap();
    let oracle = conv_oracle(&x, &w, Some(&b), [1, 2, 2], [0, 1, 1], 1);
    assert_eq!(tape.shape(y), oracle.shape());
    assert!(max_abs_diff(tape.value(y).data(), oracle.data()) < 1e-6);
}

#[test]
fn grouped_conv_matches_oracle() {
    let mut r = rng(12);
    let x = random::<f64>(&[4, 3, 4, 4], &mut r);
    let w = random::<f64>(&[4, 2, 3, 3, 3], &mut r);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv3d(xv, wv, None, [1, 1, 1], [1, 1, 1], 2).unwrap();
    let oracle = conv_oracle(&x, &w, None, [1, 1, 1], [1, 1, 1], 2);
    assert!(max_abs_diff(tape.value(y).data(), oracle.data()) < 1e-12);
}

#[test]
fn conv3d_rejections_name_the_dimension() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 4, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 1, 1, 1]));
    match tape.conv3d(x, w, None, [1, 1, 1], [0, 0, 0], 1) {
        Err(TensorError::Shape { detail, .. }) => assert!(detail.contains("channel")),
        other => panic!("unexpected {other:?}"),
    }
    let w = tape.constant(Tensor::zeros(&[4, 1, 1, 1, 1]));
    assert!(matches!(
        tape.conv3d(x, w, None, [1, 1, 1], [0, 0, 0], 2),
        Err(TensorError::Argument { .. })
    ));
}

#[test]
fn depthwise_then_pointwise_equals_dense_conv() {
    let mut r = rng(13);
    let c = 3;
    let x = random::<f64>(&[c, 3, 4, 4], &mut r);
    let dw = random::<f64>(&[c, 1, 3, 3, 3], &mut r);
    let pw = random::<f64>(&[2, c, 1, 1, 1], &mut r);

    // depthwise as a dense conv with channel-diagonal weights
    let mut diag = Tensor::<f64>::zeros(&[c, c, 3, 3, 3]);
    // composed dense weights W[o,i,k] = P[o,i] * D[i,k]
    let mut composed = Tensor::<f64>::zeros(&[2, c, 3, 3, 3]);
    for i in 0..c {
        for k in 0..27 {
            let (p, q, s) = (k / 9, (k / 3) % 3, k % 3);
            diag.set(&[i, i, p, q, s], dw.get(&[i, 0, p, q, s]));
            for o in 0..2 {
                composed.set(
                    &[o, i, p, q, s],
                    pw.get(&[o, i, 0, 0, 0]) * dw.get(&[i, 0, p, q, s]),
                );
            }
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let dwv = tape.constant(dw);
    let pwv = tape.constant(pw);
    let diagv = tape.constant(diag);
    let compv = tape.constant(composed);
    let d1 = tape.conv3d(xv, dwv, None, [1, 1, 1], [1, 1, 1], c).unwrap();
    let d2 = tape.conv3d(xv, diagv, None, [1, 1, 1], [1, 1, 1], 1).unwrap();
    assert!(max_abs_diff(tape.value(d1).data(), tape.value(d2).data()) < 1e-6);
    let sep = tape.conv3d(d1, pwv, None, [1, 1, 1], [0, 0, 0], 1).unwrap();
    let dense = tape.conv3d(xv, compv, None, [1, 1, 1], [1, 1, 1], 1).unwrap();
    assert!(max_abs_diff(tape.value(sep).data(), tape.value(dense).data()) < 1e-6);
}

fn bn_train(tape: &mut Tape<f64>, x: Var, c: usize, scale: f64, shift: f64) -> Var {
    let g = tape.constant(Tensor::full(&[c], scale));
    let b = tape.constant(Tensor::full(&[c], shift));
    tape.batch_norm_train(x, g, b, 1e-5).unwrap().0
}

#[test]
fn batch_norm_constant_input_gives_shift() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 2, 3, 3], 4.2));
    let y = bn_train(&mut tape, x, 2, 1.7, 0.25);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-9));
}

#[test]
fn batch_norm_standardizes_each_channel() {
    let mut r = rng(21);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[3, 2, 4, 4], &mut r).scaled(5.0));
    let y = bn_train(&mut tape, x, 3, 1.0, 0.0);
    for ch in tape.value(y).data().chunks(32) {
        let m = ch.iter().sum::<f64>() / 32.0;
        let v = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-5, "variance {v}");
    }
}

#[test]
fn batch_norm_matches_two_pass_oracle() {
    let mut r = rng(22);
    let x = random::<f64>(&[4, 2, 3, 3], &mut r);
    let g = random::<f64>(&[4], &mut r);
    let b = random::<f64>(&[4], &mut r);
    let eps = 1e-5;
    let mut tape = Tape::new();
    let (xv, gv, bv) = (
        tape.constant(x.clone()),
        tape.constant(g.clone()),
        tape.constant(b.clone()),
    );
    let (y, stats) = tape.batch_norm_train(xv, gv, bv, eps).unwrap();
    let n = 18;
    let mut expect = Vec::new();
    for c in 0..4 {
        let vals = &x.data()[c * n..(c + 1) * n];
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.var[c] - var).abs() < 1e-12);
        for v in vals {
            expect.push((v - mean) / (var + eps).sqrt() * g.data()[c] + b.data()[c]);
        }
    }
    assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-6);
}

#[test]
fn batch_norm_rejects_nonpositive_epsilon() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.batch_norm_train(x, g, b, 0.0).is_err());
    assert!(tape.layer_norm(x, g, b, -1.0).is_err());
}

fn ln(tape: &mut Tape<f64>, x: Var, w: usize, eps: f64) -> Var {
    let g = tape.constant(Tensor::full(&[w], 1.0));
    let b = tape.constant(Tensor::zeros(&[w]));
    tape.layer_norm(x, g, b, eps).unwrap()
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
    let y = ln(&mut tape, x, 2, 1e-5);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
    let y = ln(&mut tape, x, 2, 1e-14);
    assert!(max_abs_diff(tape.value(y).data(), &[1.0, -1.0]) < 1e-12);
}

#[test]
fn layer_norm_matches_per_token_oracle() {
    let mut r = rng(23);
    let x = random::<f64>(&[5, 6], &mut r);
    let g = random::<f64>(&[6], &mut r);
    let b = random::<f64>(&[6], &mut r);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (
        tape.constant(x.clone()),
        tape.constant(g.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let mut expect = Vec::new();
    for row in x.data().chunks(6) {
        let m = row.iter().sum::<f64>() / 6.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 6.0;
        for (j, a) in row.iter().enumerate() {
            expect.push((a - m) / (v + 1e-5).sqrt() * g.data()[j] + b.data()[j]);
        }
    }
    assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-6);
}

/// erf by its Maclaurin series, enough terms for |x| <= 3.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    for n in 0..80 {
        sum += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[3], &[0.0, 10.0, 1.0]).unwrap());
    let y = tape.gelu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((v[2] - oracle).abs() < 1e-12);
    assert!((v[2] - 0.841345).abs() < 1e-6);
}

#[test]
fn softmax_pool_matmul_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let s = tape.softmax(x).unwrap();
    assert!(max_abs_diff(tape.value(s).data(), &[1.0 / 3.0; 3]) < 1e-15);

    let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
    let p = tape.avg_pool_all(c).unwrap();
    assert!(max_abs_diff(tape.value(p).data(), &[0.7, 0.7]) < 1e-15);

    let mut r = rng(31);
    let a = random::<f64>(&[3, 4], &mut r);
    let b = random::<f64>(&[4, 2], &mut r);
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let m = tape.matmul(av, bv).unwrap();
    let mut expect = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expect[i * 2 + j] += a.get(&[i, k]) * b.get(&[k, j]);
            }
        }
    }
    assert!(max_abs_diff(tape.value(m).data(), &expect) < 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(32);
    for _ in 0..20 {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random::<f32>(&[7, 9], &mut r).scaled(20.0));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(9) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::full(&[1, 4], 0.3));
    let loss = tape.cross_entropy(l, &[2]).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

    let l = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 30.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(l, &[1]).unwrap();
    assert!(tape.value(loss).item() < 1e-9);

    let mut r = rng(41);
    let x = random::<f64>(&[5, 4], &mut r).scaled(3.0);
    let targets = [0, 3, 1, 1, 2];
    let l = tape.constant(x.clone());
    let loss = tape.cross_entropy(l, &targets).unwrap();
    let mut expect = 0.0;
    for (row, &t) in x.data().chunks(4).zip(&targets) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expect += lse - row[t];
    }
    expect /= 5.0;
    assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    assert!(tape.cross_entropy(l, &[0, 0, 0, 0, 9]).is_err());
}

#[test]
fn cross_entropy_gradient_survives_saturation() {
    // In f32 the target probability rounds to 1, yet its gradient is -e^-30.
    let mut tape = Tape::<f32>::new();
    let l = tape.leaf(Tensor::from_f64(&[1, 2], &[0.0, 30.0]).unwrap(), true);
    let loss = tape.cross_entropy(l, &[1]).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(l).unwrap().data();
    let p = (-30f64).exp();
    assert!((g[0] as f64 / p - 1.0).abs() < 1e-5, "{g:?}");
    assert!((g[1] as f64 / -p - 1.0).abs() < 1e-5, "{g:?}");
}

#[test]
fn backward_simple_identities() {
    let mut r = rng(51);
    let x0 = random::<f64>(&[3, 4], &mut r);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert!(max_abs_diff(tape.grad(x).unwrap().data(), x0.data()) < 1e-15);
}

#[test]
fn backward_accumulates_and_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[2], 3.0), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn identity_chain_preserves_gradient_exactly() {
    let mut r = rng(52);
    let x0 = random::<f32>(&[2, 3, 4], &mut r);
    let w0 = random::<f32>(&[2, 3, 4], &mut r);
    let mut tape = Tape::new();
    let x = tape.leaf(x0, true);
    let mut h = x;
    for _ in 0..10 {
        h = tape.reshape(h, &[6, 4]).unwrap();
        h = tape.permute(h, &[1, 0]).unwrap();
        h = tape.permute(h, &[1, 0]).unwrap();
        h = tape.reshape(h, &[2, 3, 4]).unwrap();
        h = tape.scale(h, 1.0);
    }
    let w = tape.constant(w0.clone());
    let p = tape.mul(h, w).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), w0.data());
}

#[test]
fn reshape_permute_round_trips_are_bit_identical() {
    let mut r = rng(53);
    let t = random::<f32>(&[2, 3, 4, 5], &mut r);
    let p = t.permute(&[2, 0, 3, 1]).unwrap();
    assert_eq!(p.shape(), &[4, 2, 5, 3]);
    let back = p.permute(&[1, 3, 0, 2]).unwrap();
    assert_eq!(back, t);
    assert_eq!(t.reshape(&[6, 20]).unwrap().reshape(&[2, 3, 4, 5]).unwrap(), t);
    assert!(t.reshape(&[7, 3]).is_err());
}

// ------------------------------------------------------------ gradient checks

type Build = fn(&mut Tape<f64>, &[Var]) -> stan_core::tensor::Result<Var>;

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> stan_core::tensor::Result<Var> {
    // random projection so every output element matters differently
    let mut r = rng(seed);
    let w = random::<f64>(tape.shape(y), &mut r);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        ("sub_mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let a = t.sub(v[0], v[1])?;
            let y = t.mul(a, v[0])?;
            weighted_sum(t, y, 2)
        }),
        ("channel_affine", vec![vec![3, 2, 2, 2], vec![3], vec![3]], |t, v| {
            let a = t.mul_channel(v[0], v[1])?;
            let y = t.add_channel(a, v[2])?;
            weighted_sum(t, y, 3)
        }),
        ("add_row", vec![vec![4, 3], vec![3]], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        ("conv3d", vec![vec![2, 3, 4, 4], vec![3, 2, 2, 3, 3], vec![3]], |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 1, 1], 1)?;
            weighted_sum(t, y, 5)
        }),
        ("depthwise", vec![vec![3, 3, 3, 3], vec![3, 1, 3, 3, 3], vec![3]], |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1], 3)?;
            weighted_sum(t, y, 6)
        }),
        ("batch_norm", vec![vec![3, 2, 3, 3], vec![3], vec![3]], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 7)
        }),
        ("batch_norm_eval", vec![vec![3, 2, 3, 3], vec![3], vec![3]], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.9], 1e-5)?;
            weighted_sum(t, y, 8)
        }),
        ("layer_norm", vec![vec![4, 5], vec![5], vec![5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 9)
        }),
        ("gelu", vec![vec![3, 4]], |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, 10)
        }),
        ("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, 11)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 12)
        }),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 13)
        }),
        ("linear", vec![vec![3, 4], vec![5, 4], vec![5]], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, 14)
        }),
        ("avg_pool_all", vec![vec![3, 2, 2, 2]], |t, v| {
            let y = t.avg_pool_all(v[0])?;
            weighted_sum(t, y, 15)
        }),
        ("mean_pick", vec![vec![2, 5]], |t, v| {
            let m = t.mean(v[0]);
            let p = t.pick(v[0], 7)?;
            let s = t.mul(m, p)?;
            Ok(s)
        }),
        ("cross_entropy", vec![vec![3, 4]], |t, v| t.cross_entropy(v[0], &[1, 0, 3])),
        ("permute_reshape_select", vec![vec![2, 3, 4]], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let s = t.select(r, 2)?;
            weighted_sum(t, s, 16)
        }),
        ("tile_frames", vec![vec![2, 3, 2, 2]], |t, v| {
            let y = t.tile_frames(v[0], 2, 2)?;
            weighted_sum(t, y, 17)
        }),
        ("max_pool3d", vec![vec![2, 2, 4, 4]], |t, v| {
            let y = t.max_pool3d(v[0], [1, 2, 2], [1, 2, 2])?;
            weighted_sum(t, y, 18)
        }),
        ("relu", vec![vec![3, 4]], |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 19)
        }),
    ]
}

#[test]
fn every_op_passes_finite_differences_at_64_bit() {
    for (i, (name, shapes, build)) in op_cases().into_iter().enumerate() {
        for trial in 0..3u64 {
            let mut r = rng(1000 + 10 * i as u64 + trial);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut r)).collect();
            let report = gradcheck::check(&inputs, build, None, 1e-3).unwrap();
            assert!(
                report.passes(1e-5),
                "{name} trial {trial}: max relative error {}",
                report.max_rel_error
            );
        }
    }
}

macro_rules! chain32 {
    ($proj:expr) => {
        |t: &mut Tape<_>, v: &[Var]| {
            let y = t.conv3d(v[0], v[1], None, [1, 1, 1], [1, 1, 1], 1)?;
            let g = t.gelu(y);
            let p = t.reshape(g, &[3, 64])?;
            let s = t.softmax(p)?;
            let pv = t.constant($proj.clone());
            let m = t.mul(s, pv)?;
            let total = t.sum(m);
            Ok(t.scale(total, 10.0))
        }
    };
}

#[test]
fn ops_pass_finite_differences_at_32_bit() {
    let mut r = rng(77);
    let x = random::<f32>(&[2, 3, 4, 4], &mut r);
    let w = random::<f32>(&[3, 2, 2, 3, 3], &mut r);
    let proj = random::<f32>(&[3, 64], &mut r);
    let proj64 = proj.cast::<f64>();
    let coords: Vec<(usize, usize)> = (0..x.len())
        .map(|j| (0, j))
        .chain((0..w.len()).map(|j| (1, j)))
        .collect();
    let report =
        gradcheck::check_promoted::<_, _, TensorError>(&[x, w], chain32!(proj), chain32!(proj64), &coords, 1e-3).unwrap();
    assert!(report.passes(1e-3), "max rel {}", report.max_rel_error);
}
