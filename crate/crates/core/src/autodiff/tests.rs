//! Finite-difference checks for every tape op, run in `f64`.

use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Check d(loss)/d(inputs) by central differences against backprop.
/// `build` must be a pure function of the input leaves.
fn grad_check(inputs: &[ArrayD<f64>], build: impl Fn(&mut Tape<f64>, &[Tx]) -> Tx) {
    let eval = |arrs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let txs: Vec<Tx> = arrs.iter().map(|a| tape.constant(a.clone())).collect();
        let loss = build(&mut tape, &txs);
        tape.scalar_value(loss)
    };

    let mut tape = Tape::new();
    let txs: Vec<Tx> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let loss = build(&mut tape, &txs);
    tape.backward(loss);

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, arr) in inputs.iter().enumerate() {
        let grad = tape
            .grad(txs[i])
            .unwrap_or_else(|| panic!("input {i} received no gradient"))
            .clone();
        // Sample up to 12 coordinates per input.
        let n = arr.len();
        let coords: Vec<usize> = if n <= 12 {
            (0..n).collect()
        } else {
            (0..12).map(|_| rng.random_range(0..n)).collect()
        };
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[c] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[c] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.as_slice().unwrap()[c];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "input {i} coord {c}: fd={fd:.8e} analytic={an:.8e}"
            );
        }
    }
}

/// Project to a scalar with a fixed random weighting so uniform gradients
/// cannot hide indexing bugs.
fn project(tape: &mut Tape<f64>, t: Tx, seed: u64) -> Tx {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, tape.shape(t));
    let w = tape.constant(w);
    let p = tape.mul(t, w);
    tape.sum_all(p)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    grad_check(&[a.clone(), b.clone()], |t, xs| {
        let s = t.add(xs[0], xs[1]);
        let d = t.sub(s, xs[1]);
        let m = t.mul(d, xs[1]);
        let e = t.exp(m);
        let th = t.tanh(e);
        let sq = t.square(th);
        let sc = t.scale(sq, 1.7);
        let ad = t.add_scalar(sc, 0.3);
        let rs = t.rsub_scalar(ad, 2.0);
        let ng = t.neg(rs);
        project(t, ng, 11)
    });
}

#[test]
fn piecewise_ops() {
    // Keep values away from the kinks at zero.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut a = randn(&mut rng, &[4, 5]);
    a.mapv_inplace(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
    grad_check(&[a], |t, xs| {
        let r = t.relu(xs[0]);
        let l = t.leaky_relu(xs[0], 0.2);
        let ab = t.abs(xs[0]);
        let s = t.add(r, l);
        let s = t.add(s, ab);
        project(t, s, 12)
    });
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, &[2, 3, 2]);
    grad_check(&[a], |t, xs| {
        let m = t.mean_all(xs[0]);
        let s = t.sum_all(xs[0]);
        let ms = t.scale(s, 0.25);
        t.add(m, ms)
    });
}

#[test]
fn conv2d_stride1_pad1() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    grad_check(&[x, w, b], |t, xs| {
        let y = t.conv2d(xs[0], xs[1], Some(xs[2]), 1, 1);
        project(t, y, 13)
    });
}

#[test]
fn conv2d_stride2_k4() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[1, 2, 8, 8]);
    let w = randn(&mut rng, &[3, 2, 4, 4]);
    let b = randn(&mut rng, &[3]);
    grad_check(&[x, w, b], |t, xs| {
        let y = t.conv2d(xs[0], xs[1], Some(xs[2]), 2, 1);
        project(t, y, 14)
    });
}

#[test]
fn conv2d_k7_pad3() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[1, 2, 8, 8]);
    let w = randn(&mut rng, &[2, 2, 7, 7]);
    grad_check(&[x, w], |t, xs| {
        let y = t.conv2d(xs[0], xs[1], None, 1, 3);
        project(t, y, 15)
    });
}

#[test]
fn conv_transpose2d_stride2_k4() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let w = randn(&mut rng, &[3, 2, 4, 4]);
    let b = randn(&mut rng, &[2]);
    grad_check(&[x, w, b], |t, xs| {
        let y = t.conv_transpose2d(xs[0], xs[1], Some(xs[2]), 2, 1);
        project(t, y, 16)
    });
}

#[test]
fn conv_transpose_matches_adjoint_shape() {
    // (H-1)*s + k - 2p: 4 -> 8 with k=4, s=2, p=1.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[1, 3, 4, 4]);
    let w = randn(&mut rng, &[3, 2, 4, 4]);
    let mut tape = Tape::new();
    let xt = tape.constant(x);
    let wt = tape.constant(w);
    let y = tape.conv_transpose2d(xt, wt, None, 2, 1);
    assert_eq!(tape.shape(y), &[1, 2, 8, 8]);
}

#[test]
fn pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 3, 6, 6]);
    grad_check(&[x.clone()], |t, xs| {
        let y = t.avg_pool2(xs[0]);
        project(t, y, 17)
    });
    grad_check(&[x], |t, xs| {
        let y = t.global_avg_pool(xs[0]);
        project(t, y, 18)
    });
}

#[test]
fn linear_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[3, 5]);
    let w = randn(&mut rng, &[4, 5]);
    let b = randn(&mut rng, &[4]);
    grad_check(&[x, w, b], |t, xs| {
        let y = t.linear(xs[0], xs[1], Some(xs[2]));
        project(t, y, 19)
    });
}

#[test]
fn instance_norm_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    grad_check(&[x], |t, xs| {
        let y = t.instance_norm(xs[0], 1e-5);
        project(t, y, 20)
    });
}

#[test]
fn layer_norm_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let gain = randn(&mut rng, &[3]);
    let shift = randn(&mut rng, &[3]);
    grad_check(&[x, gain, shift], |t, xs| {
        let y = t.layer_norm(xs[0], xs[1], xs[2], 1e-5);
        project(t, y, 21)
    });
}

#[test]
fn channel_map_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let y = randn(&mut rng, &[2, 3]);
    grad_check(&[x, y], |t, xs| {
        let o = t.add_channel_map(xs[0], xs[1]);
        project(t, o, 22)
    });
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 2]);
    grad_check(&[a, b], |t, xs| {
        let o = t.concat_cols(xs[0], xs[1]);
        project(t, o, 23)
    });
}

#[test]
fn detach_stops_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
    let d = tape.detach(x);
    let y = tape.square(d);
    let loss = tape.mean_all(y);
    tape.backward(loss);
    assert!(tape.grad(x).is_none(), "gradient leaked through detach");
}

#[test]
fn disjoint_backward_passes_accumulate_independently() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(ArrayD::from_elem(IxDyn(&[2]), 2.0));
    let b = tape.param(ArrayD::from_elem(IxDyn(&[2]), 5.0));
    let la = tape.sum_all(a);
    let sq = tape.square(b);
    let lb = tape.sum_all(sq);
    tape.backward(la);
    tape.backward(lb);
    assert_eq!(tape.grad(a).unwrap()[[0]], 1.0);
    assert_eq!(tape.grad(b).unwrap()[[0]], 10.0);
}

#[test]
fn composed_network_fragment() {
    // conv -> IN -> lrelu -> pool -> conv -> global pool -> linear
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&mut rng, &[1, 2, 8, 8]);
    let w1 = randn(&mut rng, &[3, 2, 3, 3]).mapv(|v| v * 0.5);
    let w2 = randn(&mut rng, &[4, 3, 3, 3]).mapv(|v| v * 0.5);
    let wl = randn(&mut rng, &[2, 4]);
    let bl = randn(&mut rng, &[2]);
    grad_check(&[x, w1, w2, wl, bl], |t, xs| {
        let y = t.conv2d(xs[0], xs[1], None, 1, 1);
        let y = t.instance_norm(y, 1e-5);
        let y = t.leaky_relu(y, 0.2);
        let y = t.avg_pool2(y);
        let y = t.conv2d(y, xs[2], None, 1, 1);
        let y = t.global_avg_pool(y);
        let y = t.linear(y, xs[3], Some(xs[4]));
        project(t, y, 24)
    });
}
