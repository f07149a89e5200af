mod common;

use common::{conv2d_oracle, gradcheck, random_tensor, rng, spaced_tensor};
use histnet::{Adagrad, Checkpoint, ParamStore, Tape, Tensor};
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 1, 4, 5], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
    let b = tape.leaf(t(&[1], &[0.0]), false);
    let y = tape.conv2d(xv, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_ones_kernel_counts_neighbours() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 5, 5], 1.0), false);
    let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let y = tape.conv2d(x, w, None).unwrap();
    let out = tape.value(y).data();
    assert_eq!(out[2 * 5 + 2], 9.0);
    assert_eq!(out[2], 6.0);
    assert_eq!(out[5 * 2], 6.0);
    assert_eq!(out[0], 4.0);
    assert_eq!(out[24], 4.0);
}

#[test]
fn conv2d_matches_brute_force() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = tape.conv2d(xv, wv, Some(bv)).unwrap();
    let expected = conv2d_oracle(&x, &w, b.data());
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-5);
    }
    // f32 path agrees with the f64 oracle too.
    let mut tape32 = Tape::<f32>::new();
    let (xv, wv, bv) = (tape32.leaf(x.cast(), false), tape32.leaf(w.cast(), false), tape32.leaf(b.cast(), false));
    let y = tape32.conv2d(xv, wv, Some(bv)).unwrap();
    for (a, e) in tape32.value(y).data().iter().zip(&expected) {
        assert!((*a as f64 - e).abs() < 1e-5);
    }
}

#[test]
fn conv2d_rejects_mismatch_and_even_kernels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
    assert!(tape.conv2d(x, w, None).is_err());
    let w2 = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
    assert!(tape.conv2d(x, w2, None).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = tape.leaf(Tensor::scalar(0.0), false);
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
}

#[test]
fn concat_then_slice_recovers_parts() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone(), false), tape.leaf(b.clone(), false));
    let c = tape.concat(&[av, bv]).unwrap();
    let joined = tape.value(c);
    assert_eq!(joined.shape(), &[2, 8, 4]);
    assert_eq!(joined.slice_axis1(0, 3).unwrap(), a);
    assert_eq!(joined.slice_axis1(3, 8).unwrap(), b);
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 1, 4], &[1.0, 3.0, 2.0, 0.0]), true);
    let y = tape.maxpool_time(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    let id = tape.maxpool_time(x, 1).unwrap();
    assert_eq!(tape.value(id).data(), tape.value(x).data());
    assert!(tape.maxpool_time(x, 5).is_err());

    // Ties route the gradient to the first index.
    let tied = tape.leaf(t(&[1, 4], &[2.0, 2.0, 5.0, 5.0]), true);
    let p = tape.maxpool_time(tied, 2).unwrap();
    let flat = tape.reshape(p, &[1, 2]).unwrap();
    let w = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
    let loss = tape.linear(flat, w, None).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(tied).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn avgpool_examples() {
    let mut tape = Tape::<f64>::new();
    let c = tape.leaf(Tensor::full(&[2, 3, 4, 6], 1.75), false);
    let y = tape.avgpool(c, (2, 3), (2, 3)).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 1.75));
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]), false);
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(g).data(), &[4.0]);
    let a = tape.avgpool(x, (2, 2), (1, 1)).unwrap();
    assert_eq!(tape.value(a).data(), &[4.0]);
    assert!(tape.avgpool(x, (3, 1), (1, 1)).is_err());
}

#[test]
fn conv1d_with_unit_kernel_is_a_per_step_linear_map() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[2, 3, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 3, 1], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = tape.conv1d(xv, wv, Some(bv)).unwrap();
    let out = tape.value(y).data();
    for n in 0..2 {
        for step in 0..5 {
            for o in 0..4 {
                let mut expect = b.data()[o];
                for c in 0..3 {
                    expect += w.data()[o * 3 + c] * x.data()[(n * 3 + c) * 5 + step];
                }
                assert!((out[(n * 4 + o) * 5 + step] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv1d_matches_brute_force() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 7], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = tape.conv1d(xv, wv, Some(bv)).unwrap();
    let x4 = x.clone().reshape(&[2, 3, 1, 7]).unwrap();
    let w4 = w.clone().reshape(&[4, 3, 1, 3]).unwrap();
    let expected = conv2d_oracle(&x4, &w4, b.data());
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-5);
    }
}

#[test]
fn linear_identity() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 5] = 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let w = tape.leaf(t(&[4, 4], &eye), false);
    let b = tape.leaf(Tensor::zeros(&[4]), false);
    let y = tape.linear(xv, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn dropout_modes() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[4, 8], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let a = tape.dropout(xv, 0.0, true, &mut r).unwrap();
    assert_eq!(tape.value(a), &x);
    let b = tape.dropout(xv, 0.5, false, &mut r).unwrap();
    assert_eq!(tape.value(b), &x);
    assert!(tape.dropout(xv, 1.0, true, &mut r).is_err());
}

#[test]
fn dropout_statistics() {
    let mut r = rng(8);
    let n = 100_000;
    let x = random_tensor(&mut r, &[n], 1.0, 2.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = tape.dropout(xv, 0.5, true, &mut r).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
    assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {}", survivors);
    let mean_in = x.data().iter().sum::<f64>() / n as f64;
    let mean_out = out.iter().sum::<f64>() / n as f64;
    assert!((mean_out / mean_in - 1.0).abs() < 0.02);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros(&[2, 4]), true);
    let l = tape.softmax_cross_entropy(z, &[0, 3]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

    let big = tape.leaf(t(&[1, 4], &[1000.0, 0.0, 0.0, 0.0]), false);
    let l = tape.softmax_cross_entropy(big, &[0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-12);
    assert!(tape.softmax_cross_entropy(big, &[4]).is_err());

    let mut r = rng(9);
    let logits = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let labels = [2, 0, 3];
    let mut tape = Tape::new();
    let zv = tape.leaf(logits.clone(), true);
    let loss = tape.softmax_cross_entropy(zv, &labels).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(zv).unwrap();
    for (i, row) in logits.data().chunks(4).enumerate() {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..4 {
            let expect = (row[k].exp() / denom - if k == labels[i] { 1.0 } else { 0.0 }) / 3.0;
            assert!((g[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_scalar_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    tape.backward(x).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    let y = tape.square(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    let v = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(tape.backward(v).is_err());
}

#[test]
fn fan_out_gradients_sum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let a = tape.square(x).unwrap();
    let b = tape.scale(x, 3.0).unwrap();
    let a1 = tape.reshape(a, &[1, 1]).unwrap();
    let b1 = tape.reshape(b, &[1, 1]).unwrap();
    let cat = tape.concat(&[a1, b1]).unwrap();
    let w = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
    let s = tape.linear(cat, w, None).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[7.0]);
}

#[test]
fn frozen_tensors_receive_no_gradient() {
    let mut r = rng(10);
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&mut r, &[2, 1, 4, 4], -1.0, 1.0), false);
    let w = tape.leaf(random_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0), true);
    let b = tape.leaf(random_tensor(&mut r, &[2], -1.0, 1.0), false);
    let y = tape.conv2d(x, w, Some(b)).unwrap();
    let g = tape.global_avg_pool(y).unwrap();
    let loss = tape.softmax_cross_entropy(g, &[0, 1]).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(w).is_some());
    assert!(tape.grad(x).is_none());
    assert!(tape.grad(b).is_none());
}

#[test]
fn recording_is_deterministic() {
    let run = || {
        let mut r = rng(11);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(random_tensor(&mut r, &[3, 2, 6, 6], -1.0, 1.0).cast(), false);
        let w = tape.leaf(random_tensor(&mut r, &[4, 2, 3, 3], -1.0, 1.0).cast(), true);
        let y = tape.conv2d(x, w, None).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.maxpool_time(y, 2).unwrap();
        let g = tape.global_avg_pool(y).unwrap();
        let d = tape.dropout(g, 0.5, true, &mut r).unwrap();
        let loss = tape.softmax_cross_entropy(d, &[0, 1, 3]).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).clone(), tape.grad(w).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn adagrad_closed_form_steps() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(vec![2], vec![0.5f32, -0.25]).unwrap()).unwrap();
    let mut opt = Adagrad::new(&params, 1e-3, 1e-10);

    opt.step(&mut params, &[vec![1.0, 0.0]]).unwrap();
    let w = params.get("w").unwrap().data().to_vec();
    assert!((w[0] as f64 - (0.5 - 0.001)).abs() < 1e-7);
    assert_eq!(w[1], -0.25);
    assert_eq!(opt.accumulators()[0].data(), &[1.0, 0.0]);

    opt.step(&mut params, &[vec![1.0, 0.0]]).unwrap();
    let w2 = params.get("w").unwrap().data()[0] as f64;
    let delta = w2 - w[0] as f64;
    assert!((delta + 0.001 / 2f64.sqrt()).abs() < 1e-7, "second step {}", delta);
    assert!(opt.step(&mut params, &[vec![1.0]]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut r = rng(12);
    let mut params = ParamStore::new();
    params.insert("block1.conv.weight", random_tensor(&mut r, &[4, 1, 3, 3], -1.0, 1.0).cast()).unwrap();
    params.insert("classifier.bias", random_tensor(&mut r, &[4], -1.0, 1.0).cast()).unwrap();
    let mut opt = Adagrad::new(&params, 1e-3, 1e-10);
    let grads: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.3; t.len()]).collect();
    opt.step(&mut params, &grads).unwrap();
    let ck = Checkpoint {
        params: params.clone(),
        accumulators: opt.accumulators().to_vec(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode(), ck.encode());
    assert_eq!(&ck.encode()[..4], b"HLT1");

    let bytes = ck.encode();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3], &path).is_err());
    assert!(Checkpoint::decode(b"HLT0\0\0\0\0\0\0\0\0", &path).is_err());
}

// --- finite-difference sweeps: 20 random instances per operator -------------

const H: f64 = 1e-3;
const REL: f64 = 1e-4;
const ABS: f64 = 1e-6;

fn sweep(name: &str, mut case: impl FnMut(u64) -> common::GradReport) {
    for seed in 0..20 {
        let rep = case(seed);
        assert!(rep.checked > 0);
        assert!(rep.worst <= 1.0, "{} seed {}: worst ratio {}", name, seed, rep.worst);
    }
}

#[test]
fn gradcheck_conv2d() {
    sweep("conv2d", |seed| {
        let mut r = rng(100 + seed);
        let x = random_tensor(&mut r, &[2, 2, 4, 5], -1.0, 1.0);
        let w = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[3], -1.0, 1.0);
        gradcheck(&[x, w, b], H, REL, ABS, seed, |t, v| t.conv2d(v[0], v[1], Some(v[2])))
    });
}

#[test]
fn gradcheck_conv1d_and_linear() {
    sweep("conv1d", |seed| {
        let mut r = rng(200 + seed);
        let x = random_tensor(&mut r, &[2, 3, 6], -1.0, 1.0);
        let w = random_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2], -1.0, 1.0);
        gradcheck(&[x, w, b], H, REL, ABS, seed, |t, v| t.conv1d(v[0], v[1], Some(v[2])))
    });
    sweep("linear", |seed| {
        let mut r = rng(300 + seed);
        let x = random_tensor(&mut r, &[3, 5], -1.0, 1.0);
        let w = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
        let b = random_tensor(&mut r, &[4], -1.0, 1.0);
        gradcheck(&[x, w, b], H, REL, ABS, seed, |t, v| t.linear(v[0], v[1], Some(v[2])))
    });
}

#[test]
fn gradcheck_pointwise() {
    sweep("relu", |seed| {
        let x = spaced_tensor(&mut rng(400 + seed), &[2, 3, 4], 0.05);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.relu(v[0]))
    });
    sweep("sigmoid", |seed| {
        let x = random_tensor(&mut rng(500 + seed), &[2, 3, 4], -3.0, 3.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.sigmoid(v[0]))
    });
    sweep("exp", |seed| {
        let x = random_tensor(&mut rng(600 + seed), &[2, 5], -2.0, 2.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.exp(v[0]))
    });
    sweep("square", |seed| {
        let x = random_tensor(&mut rng(700 + seed), &[2, 5], -2.0, 2.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.square(v[0]))
    });
    sweep("scale", |seed| {
        let x = random_tensor(&mut rng(800 + seed), &[7], -2.0, 2.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.scale(v[0], -1.7))
    });
}

#[test]
fn gradcheck_broadcast_and_shape_ops() {
    sweep("sub_broadcast", |seed| {
        let mut r = rng(900 + seed);
        let x = random_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
        let o = random_tensor(&mut r, &[3], -1.0, 1.0);
        gradcheck(&[x, o], H, REL, ABS, seed, |t, v| t.sub_broadcast(v[0], v[1]))
    });
    sweep("bin_affine", |seed| {
        let mut r = rng(1000 + seed);
        let x = random_tensor(&mut r, &[2, 3, 2, 3], -1.0, 1.0);
        let w = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
        gradcheck(&[x, w, b], H, REL, ABS, seed, |t, v| t.bin_affine(v[0], v[1], Some(v[2])))
    });
    sweep("concat", |seed| {
        let mut r = rng(1100 + seed);
        let a = random_tensor(&mut r, &[2, 2, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2, 4, 3], -1.0, 1.0);
        gradcheck(&[a, b], H, REL, ABS, seed, |t, v| t.concat(&[v[0], v[1]]))
    });
    sweep("flatten", |seed| {
        let x = random_tensor(&mut rng(1200 + seed), &[2, 3, 2, 4], -1.0, 1.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| {
            let f = t.flatten_channels(v[0])?;
            t.square(f)
        })
    });
}

#[test]
fn gradcheck_pooling() {
    sweep("maxpool_time", |seed| {
        let x = spaced_tensor(&mut rng(1300 + seed), &[2, 2, 3, 7], 0.01);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.maxpool_time(v[0], 2))
    });
    sweep("avgpool", |seed| {
        let x = random_tensor(&mut rng(1400 + seed), &[2, 2, 5, 6], -1.0, 1.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.avgpool(v[0], (2, 3), (1, 2)))
    });
    sweep("global_avg_pool", |seed| {
        let x = random_tensor(&mut rng(1500 + seed), &[2, 3, 2, 5], -1.0, 1.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| t.global_avg_pool(v[0]))
    });
}

#[test]
fn gradcheck_dropout_and_loss() {
    sweep("dropout", |seed| {
        let x = random_tensor(&mut rng(1600 + seed), &[4, 6], -1.0, 1.0);
        gradcheck(&[x], H, REL, ABS, seed, |t, v| {
            // A fresh generator per evaluation keeps the mask fixed across perturbations.
            t.dropout(v[0], 0.5, true, &mut rng(seed))
        })
    });
    sweep("softmax_cross_entropy", |seed| {
        let mut r = rng(1700 + seed);
        let z = random_tensor(&mut r, &[5, 4], -3.0, 3.0);
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        gradcheck(&[z], H, REL, ABS, seed, move |t, v| {
            let l = t.softmax_cross_entropy(v[0], &labels)?;
            t.reshape(l, &[1])
        })
    });
}
