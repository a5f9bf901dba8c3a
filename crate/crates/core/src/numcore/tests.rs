use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn affine_identity_and_zero_weight() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let w0 = tape.constant(Tensor::zeros(&[2, 2]));
    let b2 = tape.constant(t64(&[2], &[3.0, 4.0]));
    let y = tape.affine(x, w0, b2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn affine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = random(&[2, 3], &mut rng);
    let ws = random(&[3, 2], &mut rng);
    let bs = random(&[2], &mut rng);
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(xs.clone()), tape.constant(ws.clone()), tape.constant(bs.clone()));
    let y = tape.affine(x, w, b).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = bs.data()[j];
            for k in 0..3 {
                acc += xs.data()[i * 3 + k] * ws.data()[k * 2 + j];
            }
            assert!((tape.value(y).data()[i * 2 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.affine(x, w, b).unwrap_err().to_string();
    assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax(x).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let s = tape.softmax(x).unwrap();
    for (p, want) in tape.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((p - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_mask_zeroes_entries_and_rejects_all_masked() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[5.0, 1.0, 1.0]));
    let s = tape.softmax_axis(x, 0, Some(&[false, true, true])).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0, 0.5, 0.5]);
    assert!(tape.softmax_axis(x, 0, Some(&[false, false, false])).is_err());
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[n], &logits));
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let xs = tape.constant(t64(&[n], &shifted));
        let a = tape.softmax(x).unwrap();
        let b = tape.softmax(xs).unwrap();
        let av = tape.value(a).data().to_vec();
        prop_assert!(av.iter().all(|&p| p >= 0.0));
        prop_assert!((av.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (p, q) in av.iter().zip(tape.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t64(&[1, 3], &[0.0, 1.0, 0.0]));
    let l = tape.cross_entropy(p, &[1], 1e-12).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let u = tape.constant(t64(&[1, 3], &[1.0 / 3.0; 3]));
    let l = tape.cross_entropy(u, &[2], 1e-12).unwrap();
    assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-12);
    assert!((tape.scalar(l) - 1.0986).abs() < 1e-4);

    assert!(tape.cross_entropy(u, &[3], 1e-12).is_err());
}

#[test]
fn cross_entropy_batch_matches_rowwise_oracle() {
    let probs = [0.2, 0.5, 0.3, 0.9, 0.05, 0.05, 0.1, 0.1, 0.8];
    let labels = [1, 0, 2];
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t64(&[3, 3], &probs));
    let l = tape.cross_entropy(p, &labels, 1e-12).unwrap();
    let oracle: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs[r * 3 + y].ln())
        .sum::<f64>()
        / 3.0;
    assert!((tape.scalar(l) - oracle).abs() < 1e-12);
}

#[test]
fn backward_sum_and_unreachable() {
    let mut store = ParamStore::<f64>::new(7);
    let w = store.add("w", t64(&[2], &[0.3, -0.1]));
    let u = store.add("u", t64(&[2], &[1.0, 1.0]));
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let _uv = tape.param(&store, u);
    let loss = tape.sum(wv);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(store.key(w)).unwrap().data(), &[1.0, 1.0]);
    assert!(g.get(store.key(u)).is_none());
    store.accumulate(&g, 1.0);
    assert_eq!(store.block(u).grad.data(), &[0.0, 0.0]);

    assert!(matches!(
        tape.backward(loss),
        Err(crate::error::OceanError::BackwardTwice)
    ));
    tape.clear();
    let wv = tape.param(&store, w);
    let loss = tape.sum(wv);
    assert!(tape.backward(loss).is_ok());
}

#[test]
fn loss_independent_of_param_has_zero_grad() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("w", t64(&[3], &[1.0, 2.0, 3.0]));
    let mut tape = Tape::new();
    let _w = tape.param(&store, 0);
    let c = tape.constant(t64(&[2], &[1.0, 1.0]));
    let loss = tape.sum(c);
    let g = tape.backward(loss).unwrap();
    store.accumulate(&g, 1.0);
    assert_eq!(store.block(0).grad.data(), &[0.0, 0.0, 0.0]);
}

/// Gradient-check helper: one random block per entry in `shapes`.
fn check(shapes: &[&[usize]], seed: u64, f: impl FnMut(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new(0);
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("p{i}"), random(s, &mut rng));
    }
    let rep = finite_diff_check(&store, f, 1e-5, 1e-4).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

/// Projects an arbitrary tensor to a scalar with a fixed random weighting so
/// every output element gets a distinct upstream gradient.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> crate::error::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&shape, &mut rng));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    check(&[&[2, 3], &[2, 3], &[3]], 1, |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let m = t.mul(s, v[1])?;
        let m = t.mul_trailing(m, v[2])?;
        let m = t.add_trailing(m, v[2])?;
        let e = t.exp(m);
        let th = t.tanh(e);
        let sg = t.sigmoid(th);
        let sc = t.scale(sg, 1.7);
        let sh = t.shift(sc, 0.3);
        let lg = t.log(sh, 1e-12);
        let r = t.mean(lg);
        let q = probe(t, sh, 9)?;
        t.add(r, q)
    });
}

#[test]
fn gradcheck_relu_away_from_kink() {
    check(&[&[4]], 2, |t, v| {
        let s = t.shift(v[0], 0.05);
        let r = t.relu(s);
        probe(t, r, 3)
    });
}

#[test]
fn gradcheck_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape: &[usize] = if ta { &[3, 2] } else { &[2, 3] };
        let b_shape: &[usize] = if tb { &[4, 3] } else { &[3, 4] };
        check(&[a_shape, b_shape], 4, |t, v| {
            let y = t.matmul_t(v[0], ta, v[1], tb)?;
            probe(t, y, 5)
        });
    }
}

#[test]
fn gradcheck_softmax_axes_and_layer_norm() {
    check(&[&[3, 4, 2]], 6, |t, v| {
        let s0 = t.softmax_axis(v[0], 0, None)?;
        let s1 = t.softmax_axis(v[0], 1, Some(&[true, false, true, true]))?;
        let a = probe(t, s0, 7)?;
        let b = probe(t, s1, 8)?;
        t.add(a, b)
    });
    check(&[&[3, 5], &[5], &[5]], 9, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(t, y, 10)
    });
}

#[test]
fn gradcheck_gru_combine() {
    check(&[&[2, 9], &[2, 9], &[2, 3]], 12, |t, v| {
        let y = t.gru_combine(v[0], v[1], v[2])?;
        probe(t, y, 13)
    });
}

#[test]
fn gradcheck_conv_and_transpose() {
    check(&[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], 14, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
        probe(t, y, 15)
    });
    check(&[&[2, 3, 3, 3], &[3, 2, 4, 4], &[2]], 16, |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 1, 0)?;
        probe(t, y, 17)
    });
    check(&[&[1, 2, 2, 2], &[2, 1, 5, 5], &[1]], 18, |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 2, 1)?;
        probe(t, y, 19)
    });
}

#[test]
fn gradcheck_shape_ops_and_mix() {
    check(&[&[3, 4], &[3, 2, 4]], 20, |t, v| {
        let tr = t.transpose(v[0])?;
        let rs = t.reshape(tr, &[2, 6])?;
        let nw = t.narrow(rs, 1, 1, 3)?;
        let rw = t.rows(v[0], &[2, 0, 2])?;
        let rp = t.repeat_last(rw, 2);
        let mx = t.mix(v[0], v[1])?;
        let a = probe(t, nw, 21)?;
        let b = probe(t, rp, 22)?;
        let c = probe(t, mx, 23)?;
        t.add_all(&[a, b, c])
    });
    check(&[&[2, 3], &[2, 3]], 24, |t, v| {
        let s = t.softmax(v[0])?;
        let ce = t.cross_entropy(s, &[2, 0], 1e-12)?;
        let m = t.mse(v[0], v[1])?;
        let p = t.pick(v[1], 4)?;
        t.add_all(&[ce, m, p])
    });
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
    for co in 0..3 {
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut acc = b.data()[co];
                for ci in 0..2 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += x.data()[(ci * 16) + (iy * 4 + ix) as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                }
                let got = tape.value(y).data()[co * 16 + (oy * 4 + ox) as usize];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x; w), y> == <x, conv_transpose(y; w)> for zero bias.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[1, 2, 8, 8], &mut rng);
    let w = random(&[3, 2, 4, 4], &mut rng);
    let y = random(&[1, 3, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, yv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
    let b3 = tape.constant(Tensor::zeros(&[3]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let cx = tape.conv2d(xv, wv, b3, 2, 1).unwrap();
    let ty = tape.conv_transpose2d(yv, wv, b2, 2, 1, 0).unwrap();
    let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn forward_backward_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut store = ParamStore::<f32>::new(0);
        store.normal("w", &[2, 3, 3, 3], 0.3, &mut rng);
        store.zeros("b", &[2]);
        let x: Tensor<f32> = random(&[1, 3, 6, 6], &mut rng).cast();
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store, true);
        let xv = tape.constant(x);
        let y = tape.conv2d(xv, p.get(0), p.get(1), 1, 1).unwrap();
        let y = tape.tanh(y);
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        (tape.scalar(l).to_bits(), g.entries[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
