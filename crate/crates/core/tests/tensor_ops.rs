use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
mod common;

use common::{naive_conv, naive_maxpool};
use stnet_core::tensor::{
    grad_check, GradCheckConfig, Padding, ParamId, ParamStore, Shape, Tape, Tensor, Var,
};

fn conv_once(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    dilation: usize,
    groups: usize,
    pad: usize,
) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape
        .conv2d(xv, wv, bv, dilation, groups, Padding::Explicit(pad))
        .unwrap();
    tape.value(y).clone()
}

#[test]
fn grouped_dilated_conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(Shape::new(2, 6, 8, 8), 1.0, &mut rng);
    let w = Tensor::randn(Shape::new(6, 2, 3, 3), 1.0, &mut rng);
    let b = Tensor::randn(Shape::new(1, 6, 1, 1), 1.0, &mut rng);
    let fast = conv_once(&x, &w, Some(&b), 2, 3, 2);
    let slow = naive_conv(&x, &w, Some(&b), 2, 3, 2);
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
}

#[test]
fn conv_oracle_equivalence_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 100 {
        let groups = [1, 3, 9][rng.random_range(0..3)];
        let c_in = groups * rng.random_range(1..=9 / groups);
        let c_out = groups * rng.random_range(1..=9 / groups);
        let k = [1, 3][rng.random_range(0..2)];
        let dilation = rng.random_range(1..=7);
        let (h, w) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let pad = rng.random_range(0..=dilation * (k - 1));
        let span = dilation * (k - 1);
        if h + 2 * pad <= span || w + 2 * pad <= span {
            continue;
        }
        let n = rng.random_range(1..=2);
        let x = Tensor::randn(Shape::new(n, c_in, h, w), 1.0, &mut rng);
        let wt = Tensor::randn(Shape::new(c_out, c_in / groups, k, k), 1.0, &mut rng);
        let b = Tensor::randn(Shape::new(1, c_out, 1, 1), 1.0, &mut rng);
        let fast = conv_once(&x, &wt, Some(&b), dilation, groups, pad);
        let slow = naive_conv(&x, &wt, Some(&b), dilation, groups, pad);
        let err = fast.max_abs_diff(&slow).unwrap();
        assert!(
            err < 1e-12,
            "n={n} cin={c_in} cout={c_out} k={k} d={dilation} g={groups} pad={pad} {h}x{w}: {err}"
        );
        checked += 1;
    }
}

#[test]
fn maxpool_matches_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(Shape::new(1, 2, 8, 8), 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.maxpool2d(v, 2, 2).unwrap();
    assert!(tape.value(y).bit_eq(&naive_maxpool(&x, 2, 2)));

    let c = Tensor::full(Shape::new(1, 1, 6, 6), 2.5);
    let cv = tape.constant(c);
    let cy = tape.maxpool2d(cv, 3, 3).unwrap();
    assert!(tape.value(cy).data().iter().all(|&v| v == 2.5));
}

/// Quadratic readout against a fixed random target, so every op
/// sees a non-uniform upstream gradient.
fn readout(tape: &mut Tape, y: Var, target: &Tensor) -> Var {
    let t = tape.constant(target.clone());
    let prod = tape.mul(y, t).unwrap();
    let lin = tape.sum(prod);
    let sq = tape.sum_squares(y);
    let half = tape.scale(sq, 0.5);
    tape.add(lin, half).unwrap()
}

fn all_probes(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect()
}

fn check_op(
    inputs: Vec<Tensor>,
    out_shape: Shape,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t))
        .collect();
    let target = Tensor::randn(out_shape, 1.0, &mut rng);
    let probes = all_probes(&store);
    let report = grad_check(
        &mut store,
        &probes,
        |s, tape| {
            let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = build(tape, &vars);
            Ok(readout(tape, y, &target))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    assert!(report.max_rel_error() < 1e-6, "{report}");
    assert_eq!(report.excluded(), 0, "{report}");
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (groups, dilation, k) in [(1, 1, 3), (3, 2, 3), (3, 1, 1), (1, 3, 3)] {
        let x = Tensor::randn(Shape::new(2, 6, 5, 5), 1.0, &mut rng);
        let w = Tensor::randn(Shape::new(3, 6 / groups, k, k), 0.5, &mut rng);
        let b = Tensor::randn(Shape::new(1, 3, 1, 1), 0.5, &mut rng);
        check_op(vec![x, w, b], Shape::new(2, 3, 5, 5), |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), dilation, groups, Padding::Same)
                .unwrap()
        });
    }
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(Shape::new(1, 2, 4, 6), 1.0, &mut rng);
    check_op(vec![x], Shape::new(1, 2, 2, 3), |t, v| t.maxpool2d(v[0], 2, 2).unwrap());
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(0.0));
    let report = grad_check(
        &mut store,
        &[(id, 0)],
        |s, t| {
            let x = t.param(s, id);
            let y = t.sigmoid(x);
            Ok(t.sum(y))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!((report.probes[0].numeric - 0.25).abs() < 1e-6);
    assert!((report.probes[0].analytic - 0.25).abs() < 1e-15);
}

#[test]
fn pointwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // keep relu inputs away from the kink
    let x = Tensor::randn(Shape::new(2, 3, 3, 3), 1.0, &mut rng)
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_op(vec![x.clone()], x.shape(), |t, v| t.relu(v[0]));
    check_op(vec![x.clone()], x.shape(), |t, v| t.sigmoid(v[0]));
}

#[test]
fn split_concat_gradients_route_to_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::randn(Shape::new(2, 9, 3, 3), 1.0, &mut rng);
    let b = Tensor::randn(Shape::new(2, 2, 3, 3), 1.0, &mut rng);
    check_op(vec![a, b], Shape::new(2, 11, 3, 3), |t, v| {
        let parts = t.split(v[0], &[3, 4, 2]).unwrap();
        // reorder so each slice lands somewhere new
        t.concat(&[parts[2], v[1], parts[0], parts[1]]).unwrap()
    });
}

#[test]
fn mix_and_arithmetic_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = Shape::new(2, 2, 3, 3);
    let a = Tensor::randn(s, 1.0, &mut rng);
    let b = Tensor::randn(s, 1.0, &mut rng);
    check_op(vec![a.clone(), b.clone()], s, |t, v| {
        let m = t.affine_mix(v[0], v[1], 0.3).unwrap();
        let p = t.mul(m, v[0]).unwrap();
        let d = t.sub(p, v[1]).unwrap();
        t.scale(d, 1.7)
    });
    check_op(vec![a], Shape::new(3, 2, 3, 3), |t, v| {
        t.select_batch(v[0], &[1, 0, 1]).unwrap()
    });
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = Shape::new(1, 1, 4, 4);
    let logits = Tensor::randn(s, 1.0, &mut rng);
    let labels = Tensor::uniform(s, 0.0, 1.0, &mut rng).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let mut store = ParamStore::new();
    let id = store.add("z", logits);
    let probes = all_probes(&store);
    let report = grad_check(
        &mut store,
        &probes,
        |st, t| {
            let z = t.param(st, id);
            let p = t.sigmoid(z);
            t.bce_sum(p, &labels, 1e-7)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

fn two_losses(store: &ParamStore, tape: &mut Tape, id: ParamId, x: &Tensor) -> (Var, Var) {
    let w = tape.param(store, id);
    let xv = tape.constant(x.clone());
    let y = tape.conv2d(xv, w, None, 1, 1, Padding::Same).unwrap();
    let r = tape.relu(y);
    let l1 = tape.sum_squares(r);
    let s = tape.sigmoid(y);
    let l2 = tape.sum(s);
    (l1, l2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(Shape::new(1, 2, 5, 5), 1.0, &mut rng);
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::randn(Shape::new(2, 2, 3, 3), 0.5, &mut rng));

        let mut grads = Vec::new();
        for pick in 0..2 {
            store.zero_grad();
            let mut tape = Tape::new();
            let (l1, l2) = two_losses(&store, &mut tape, id, &x);
            tape.backward(if pick == 0 { l1 } else { l2 }, &mut store).unwrap();
            grads.push(store.grad(id).clone());
        }
        store.zero_grad();
        let mut tape = Tape::new();
        let (l1, l2) = two_losses(&store, &mut tape, id, &x);
        let s1 = tape.scale(l1, a);
        let s2 = tape.scale(l2, b);
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total, &mut store).unwrap();
        for ((g, g1), g2) in store.grad(id).data().iter().zip(grads[0].data()).zip(grads[1].data()) {
            let expected = a * g1 + b * g2;
            prop_assert!((g - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn split_concat_is_identity(c1 in 1usize..4, c2 in 1usize..4, c3 in 1usize..4, n in 1usize..3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(Shape::new(n, c1 + c2 + c3, 3, 2), 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let parts = tape.split(v, &[c1, c2, c3]).unwrap();
        let back = tape.concat(&parts).unwrap();
        prop_assert!(tape.value(back).bit_eq(&x));
        let again = tape.split(back, &[c1, c2, c3]).unwrap();
        for (p, q) in parts.iter().zip(&again) {
            prop_assert!(tape.value(*p).bit_eq(tape.value(*q)));
        }
    }
}
