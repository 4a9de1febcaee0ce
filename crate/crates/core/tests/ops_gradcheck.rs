//! Finite-difference checks of every differentiable tape operation.

use std::sync::Arc;

use bve_core::numcore::{grad_check_with, rng, ConvMap, GradCheckOptions, Graph, InitRule, ParamStore, Segments, Tensor, Var};
use bve_core::Result;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-7;

/// Builds parameters with the given shapes, applies `f`, and regresses the
/// output onto a fixed random target so every output coordinate matters.
fn check(seed: u64, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        let t = Tensor::from_fn(s, |_| r.random_range(-1.0..1.0));
        store.insert(&format!("p{i}"), t, InitRule::Standard).unwrap();
    }
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..shapes.len()).map(|i| g.param(&store, &format!("p{i}")).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let target = Tensor::new(probe.shape(), probe.data().iter().map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let loss = |g: &mut Graph, st: &ParamStore| -> Result<Var> {
        let vars: Vec<Var> = (0..shapes.len()).map(|i| g.param(st, &format!("p{i}"))).collect::<Result<_>>()?;
        let out = f(g, &vars)?;
        if g.value(out).len() == 1 {
            return Ok(out);
        }
        g.sq_error(out, &target, None)
    };
    grad_check_with(&store, GradCheckOptions { h: 1e-5, floor: 1e-4, coords_per_param: None, seed }, loss).unwrap().max_rel_error
}

#[test]
fn dense_ops() {
    assert!(check(1, &[&[3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2]))) < TOL);
    assert!(check(2, &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])) < TOL);
    assert!(check(3, &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check(4, &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])) < TOL);
    assert!(check(5, &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])) < TOL);
    assert!(check(6, &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1])) < TOL);
    assert!(check(7, &[&[3, 4], &[4]], |g, v| g.mul_row(v[0], v[1])) < TOL);
    assert!(check(8, &[&[3, 4]], |g, v| Ok(g.affine(v[0], -1.5, 0.25))) < TOL);
}

#[test]
fn shape_ops() {
    assert!(check(10, &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]])) < TOL);
    assert!(check(16, &[&[2, 3], &[1, 3], &[4, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[2]])) < TOL);
    assert!(check(11, &[&[3, 5]], |g, v| g.slice_cols(v[0], 1, 3)) < TOL);
    let idx: Arc<[usize]> = vec![0, 5, 5, 2, 7].into();
    assert!(check(12, &[&[2, 4]], move |g, v| g.gather(v[0], idx.clone(), &[5])) < TOL);
    let rows: Arc<[usize]> = vec![2, 0, 2, 1].into();
    assert!(check(13, &[&[3, 4]], move |g, v| g.gather_rows(v[0], rows.clone())) < TOL);
    assert!(check(14, &[&[1, 4]], |g, v| g.repeat_rows(v[0], 3)) < TOL);
    assert!(check(15, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])) < TOL);
}

#[test]
fn nonlinear_ops() {
    assert!(check(20, &[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6)) < TOL);
    assert!(check(21, &[&[3, 6]], |g, v| g.layer_norm(v[0], None, None, 1e-6)) < TOL);
    assert!(check(22, &[&[3, 4]], |g, v| Ok(g.silu(v[0]))) < TOL);
    assert!(check(23, &[&[3, 4]], |g, v| Ok(g.gelu(v[0]))) < TOL);
}

#[test]
fn reductions_and_losses() {
    assert!(check(30, &[&[3, 4]], |g, v| g.mean_rows(v[0])) < TOL);
    assert!(check(31, &[&[3, 4]], |g, v| Ok(g.sum(v[0]))) < TOL);
    assert!(check(32, &[&[3, 4]], |g, v| Ok(g.mean(v[0]))) < TOL);
    let t = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
    let w: Arc<[f64]> = (0..12).map(|i| (i % 3) as f64).collect();
    assert!(check(33, &[&[3, 4]], move |g, v| g.sq_error(v[0], &t, Some(w.clone()))) < TOL);
}

#[test]
fn attention_ops() {
    assert!(check(40, &[&[3, 4], &[5, 4], &[5, 4]], |g, v| g.attention(v[0], v[1], v[2], 2)) < TOL);
    let segs = Arc::new(Segments::from_lengths(&[2, 0, 3], &[1, 2, 4]).unwrap());
    assert!(check(41, &[&[5, 6], &[7, 6], &[7, 6]], move |g, v| g.attention_segments(v[0], v[1], v[2], 3, segs.clone())) < TOL);
    let offs: Arc<[usize]> = vec![0, 2, 2, 5].into();
    let o2 = offs.clone();
    assert!(check(42, &[&[5, 3], &[3, 6]], move |g, v| g.seg_matmul(v[0], v[1], offs.clone(), 2, false)) < TOL);
    assert!(check(43, &[&[5, 3], &[3, 6]], move |g, v| g.seg_matmul(v[0], v[1], o2.clone(), 2, true)) < TOL);
}

#[test]
fn sparse_conv_op() {
    let map = Arc::new(ConvMap { in_rows: 4, out_rows: 3, taps: vec![vec![(0, 0), (1, 2)], vec![], vec![(3, 0), (2, 1), (0, 2)]] });
    assert!(check(50, &[&[4, 2], &[3, 2, 3], &[3]], move |g, v| g.sparse_conv(v[0], v[1], Some(v[2]), map.clone())) < TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn segmented_attention_gradients(q_lens in prop::collection::vec(0usize..4, 1..4), k_extra in prop::collection::vec(1usize..4, 3), seed in 0u64..1000) {
        let k_lens: Vec<usize> = q_lens.iter().zip(&k_extra).map(|(_, &k)| k).collect();
        let (lq, lk): (usize, usize) = (q_lens.iter().sum(), k_lens.iter().sum());
        prop_assume!(lq > 0);
        let segs = Arc::new(Segments::from_lengths(&q_lens, &k_lens).unwrap());
        let err = check(seed, &[&[lq, 4], &[lk, 4], &[lk, 4]], move |g, v| g.attention_segments(v[0], v[1], v[2], 2, segs.clone()));
        prop_assert!(err < TOL, "rel error {err}");
    }
}
