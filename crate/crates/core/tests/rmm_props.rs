//! Randomized invariants of addressing and recall.

use mavqa_core::feature::{flatten_visual, unflatten_visual, Dims, FeatureVec, VisualFeatureMap};
use mavqa_core::rmm::{address, combine_addressing, generate_pseudo_audio, generate_pseudo_visual, SlotBank};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), vals[..rows * cols].to_vec()).unwrap()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

/// Small random world: L slots, c channels, w×h grid.
fn instance() -> impl Strategy<Value = (Dims, usize, Vec<f64>)> {
    (1usize..6, 1usize..4, 1usize..3, 1usize..3).prop_flat_map(|(l, c, w, h)| {
        let dims = Dims::new(c, w, h, 2).unwrap();
        let n = l * (dims.visual_len() + 2 * c) + dims.visual_len() + 2 * c;
        (Just(dims), Just(l), vals(n))
    })
}

fn unpack(dims: Dims, l: usize, v: &[f64]) -> (SlotBank, VisualFeatureMap, FeatureVec, FeatureVec) {
    let (vl, c) = (dims.visual_len(), dims.c);
    let mut at = 0;
    let mut take = |n: usize| {
        let s = &v[at..at + n];
        at += n;
        s.to_vec()
    };
    let gv = matrix(l, vl, &take(l * vl));
    let ga = matrix(l, c, &take(l * c));
    let gt = matrix(l, c, &take(l * c));
    let bank = SlotBank::from_parts(gv, ga, gt, dims).unwrap();
    let visual = unflatten_visual(take(vl), dims.w, dims.h, c).unwrap();
    let audio = FeatureVec::new(take(c)).unwrap();
    let text = FeatureVec::new(take(c)).unwrap();
    (bank, visual, audio, text)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn addressing_is_a_distribution(l in 1usize..10, d in 1usize..6, c in 1usize..6, raw in vals(70)) {
        let bank = matrix(l, d, &raw);
        let a = address(&raw[60..60 + d], bank.view(), c).unwrap();
        let b = address(&raw[54..54 + d], bank.view(), c).unwrap();
        for w in [&a, &b, &combine_addressing(&a, &b).unwrap()] {
            prop_assert!(w.weights().iter().all(|x| *x >= 0.0));
            prop_assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pseudo_features_stay_in_hull((dims, l, v) in instance()) {
        let (bank, visual, audio, text) = unpack(dims, l, &v);
        let pa = generate_pseudo_audio(&visual, &text, &bank).unwrap();
        for (k, x) in pa.as_slice().iter().enumerate() {
            let col = bank.ga.column(k);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
        }
        let pv = generate_pseudo_visual(&audio, &text, &bank).unwrap();
        for (k, x) in flatten_visual(&pv).iter().enumerate() {
            let col = bank.gv.column(k);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
        }
    }

    #[test]
    fn slot_permutation_is_invisible((dims, l, v) in instance(), shift in 0usize..5) {
        let (bank, visual, audio, text) = unpack(dims, l, &v);
        let perm: Vec<usize> = (0..l).map(|j| (j + shift) % l).collect();
        let permute = |g: &Array2<f64>| {
            let mut out = g.clone();
            for (j, &p) in perm.iter().enumerate() {
                out.row_mut(j).assign(&g.row(p));
            }
            out
        };
        let shuffled = SlotBank::from_parts(permute(&bank.gv), permute(&bank.ga), permute(&bank.gt), dims).unwrap();
        let a1 = generate_pseudo_audio(&visual, &text, &bank).unwrap();
        let a2 = generate_pseudo_audio(&visual, &text, &shuffled).unwrap();
        let v1 = generate_pseudo_visual(&audio, &text, &bank).unwrap();
        let v2 = generate_pseudo_visual(&audio, &text, &shuffled).unwrap();
        for (x, y) in a1.as_slice().iter().zip(a2.as_slice()).chain(v1.as_flat().iter().zip(v2.as_flat())) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn visual_flatten_round_trip(w in 1usize..5, h in 1usize..5, c in 1usize..5, raw in vals(64)) {
        let n = w * h * c;
        let v = unflatten_visual(raw[..n].to_vec(), w, h, c).unwrap();
        prop_assert_eq!(unflatten_visual(flatten_visual(&v), w, h, c).unwrap(), v);
    }
}

#[test]
fn one_bank_serves_both_directions() {
    let dims = Dims::new(2, 1, 1, 2).unwrap();
    let mut bank = SlotBank::from_parts(
        matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        matrix(2, 2, &[0.5, 0.5, -0.5, 0.5]),
        dims,
    )
    .unwrap();
    let audio = FeatureVec::new(vec![2.0, -1.0]).unwrap();
    let text = FeatureVec::new(vec![0.3, 0.1]).unwrap();
    let before = generate_pseudo_visual(&audio, &text, &bank).unwrap();
    // G_a is the aggregation bank of the audio path and the addressing bank
    // of the visual path.
    bank.ga[[0, 0]] = -4.0;
    let after = generate_pseudo_visual(&audio, &text, &bank).unwrap();
    assert_ne!(before, after);
}
