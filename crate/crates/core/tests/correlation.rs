mod common;

use std::rc::Rc;

use proptest::prelude::*;
use common::{array, brute_group, brute_lift, rotations};
use robustcaps::group::{act_on_group_field, act_on_scalar_field, GroupElement};
use robustcaps::layers::{correlate, group_plan, lifting_plan, Domain};
use robustcaps::tensor::{grad_check, Array, Real, Tape};

fn lift<T: Real>(x: &Array<T>, w: &Array<T>, stride: usize) -> Array<T> {
    let s = w.shape();
    let plan = Rc::new(lifting_plan(s[1], s[3]));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let out = correlate(&mut tape, xv, wv, None, &plan, Domain::Plane, stride).unwrap();
    tape.value(out).clone()
}

fn gconv<T: Real>(x: &Array<T>, w: &Array<T>, stride: usize) -> Array<T> {
    let s = w.shape();
    let plan = Rc::new(group_plan(s[1], s[4]));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let out = correlate(&mut tape, xv, wv, None, &plan, Domain::Group, stride).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lifting_matches_brute_force(
        (x, w, stride) in (1usize..=6, 1usize..=6, 1usize..=3, 1usize..=3, 1usize..=2)
            .prop_flat_map(|(h, wd, c, o, s)| (array(vec![1, c, h, wd]), array(vec![o, c, 3, 3]), Just(s)))
    ) {
        let fast = lift(&x, &w, stride);
        let slow = brute_lift(&x, &w, stride);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-6, "diff {}", fast.max_abs_diff(&slow));
    }

    #[test]
    fn group_correlation_matches_brute_force(
        (x, w, stride) in (1usize..=6, 1usize..=6, 1usize..=3, 1usize..=3, 1usize..=2)
            .prop_flat_map(|(h, wd, c, o, s)| (array(vec![1, c, 4, h, wd]), array(vec![o, c, 4, 3, 3]), Just(s)))
    ) {
        let fast = gconv(&x, &w, stride);
        let slow = brute_group(&x, &w, stride);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-6, "diff {}", fast.max_abs_diff(&slow));
    }

    #[test]
    fn lifting_commutes_with_rotation_in_f32(
        g in rotations(),
        (x, w) in (2usize..=9, 1usize..=3, 1usize..=3, prop::sample::select(vec![1usize, 3, 5]))
            .prop_flat_map(|(n, c, o, k)| (array(vec![2, c, n, n]), array(vec![o, c, k, k])))
    ) {
        let (x, w) = (x.cast::<f32>(), w.cast::<f32>());
        let lhs = lift(&act_on_scalar_field(&g, &x), &w, 1);
        let rhs = act_on_group_field(&g, &lift(&x, &w, 1));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn group_correlation_commutes_with_rotation_in_f32(
        g in rotations(),
        (x, w) in (2usize..=8, 1usize..=3, 1usize..=3, prop::sample::select(vec![1usize, 3, 5]))
            .prop_flat_map(|(n, c, o, k)| (array(vec![1, c, 4, n, n]), array(vec![o, c, 4, k, k])))
    ) {
        let (x, w) = (x.cast::<f32>(), w.cast::<f32>());
        let lhs = gconv(&act_on_group_field(&g, &x), &w, 1);
        let rhs = act_on_group_field(&g, &gconv(&x, &w, 1));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn group_correlation_commutes_with_roto_translation_on_padded_support(
        (r, u, v) in (0i64..4, -2i64..=2, -2i64..=2),
        core in array(vec![1, 2, 4, 4, 4]),
        w in array(vec![2, 2, 4, 3, 3]),
    ) {
        // a zero margin of 3 keeps the shifted support and its filter
        // footprint inside the grid, so equality holds everywhere
        let mut x = Array::zeros([1, 2, 4, 10, 10]);
        for c in 0..2 {
            for s in 0..4 {
                for i in 0..4 {
                    for j in 0..4 {
                        x.set(&[0, c, s, i + 3, j + 3], core.at(&[0, c, s, i, j]));
                    }
                }
            }
        }
        let g = GroupElement::new(r, u, v);
        let lhs = gconv(&act_on_group_field(&g, &x), &w, 1);
        let rhs = act_on_group_field(&g, &gconv(&x, &w, 1));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}

#[test]
fn centered_delta_lift_copies_input_to_every_rotation() {
    let x = Array::from_fn([1, 1, 5, 5], |i| (i as f64 * 0.77).sin());
    let mut w = Array::zeros([1, 1, 3, 3]);
    w.set(&[0, 0, 1, 1], 1.0);
    let out = lift(&x, &w, 1);
    for r in 0..4 {
        for i in 0..25 {
            assert_eq!(out.at(&[0, 0, r, i / 5, i % 5]), x.data()[i]);
        }
    }
}

#[test]
fn identity_group_filter_reproduces_input() {
    let x = Array::from_fn([1, 1, 4, 4, 4], |i| (i as f64 * 0.31).cos());
    let mut w = Array::zeros([1, 1, 4, 1, 1]);
    w.set(&[0, 0, 0, 0, 0], 1.0);
    assert_eq!(gconv(&x, &w, 1).data(), x.data());
}

#[test]
fn zero_group_filter_yields_bias() {
    let x = Array::from_fn([1, 2, 4, 3, 3], |i| i as f64);
    let w = Array::<f64>::zeros([2, 2, 4, 3, 3]);
    let plan = Rc::new(group_plan(2, 3));
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let bv = tape.leaf(Array::from_vec([1, 2, 1, 1, 1], vec![0.5, -1.5]).unwrap());
    let out = correlate(&mut tape, xv, wv, Some(bv), &plan, Domain::Group, 1).unwrap();
    let out = tape.value(out);
    for (i, v) in out.data().iter().enumerate() {
        let expected = if i < 36 { 0.5 } else { -1.5 };
        assert_eq!(*v, expected);
    }
}

#[test]
fn lifting_gradients_match_finite_differences() {
    let x = Array::from_fn([1, 2, 5, 5], |i| (i as f64 * 0.41).sin());
    let w = Array::from_fn([2, 2, 3, 3], |i| (i as f64 * 0.23).cos());
    let probe = Array::from_fn([1, 2, 4, 3, 3], |i| (i as f64 * 0.17).sin());
    let plan = Rc::new(lifting_plan(2, 3));
    for wrt_input in [true, false] {
        let report = grad_check(
            |t, v| {
                let (xv, wv) = if wrt_input {
                    (v, t.leaf(w.clone()))
                } else {
                    (t.leaf(x.clone()), v)
                };
                let y = correlate(t, xv, wv, None, &plan, Domain::Plane, 2)?;
                let p = t.leaf(probe.clone());
                let y = t.mul(y, p)?;
                t.sum_all(y)
            },
            if wrt_input { &x } else { &w },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn group_gradients_match_finite_differences() {
    let x = Array::from_fn([1, 2, 4, 4, 4], |i| (i as f64 * 0.41).sin());
    let w = Array::from_fn([2, 2, 4, 3, 3], |i| (i as f64 * 0.23).cos());
    let probe = Array::from_fn([1, 2, 4, 4, 4], |i| (i as f64 * 0.17).sin());
    let plan = Rc::new(group_plan(2, 3));
    for wrt_input in [true, false] {
        let report = grad_check(
            |t, v| {
                let (xv, wv) = if wrt_input {
                    (v, t.leaf(w.clone()))
                } else {
                    (t.leaf(x.clone()), v)
                };
                let y = correlate(t, xv, wv, None, &plan, Domain::Group, 1)?;
                let p = t.leaf(probe.clone());
                let y = t.mul(y, p)?;
                t.sum_all(y)
            },
            if wrt_input { &x } else { &w },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
