//! Rectified-flow objectives, timestep sampling, guidance dropout and the sampler.

use bve_core::blocks::ConditioningBundle;
use bve_core::flow::{
    cfg_dropout, cfm_loss, cfm_loss_graph, draw_dropout, edit_loss, edit_loss_graph, euler_sample_cfg, interpolate, logit, sample_t_logit_normal, DropMode,
    FlowSample, SamplerConfig, VelocityField,
};
use bve_core::numcore::{grad_check_with, rng, GradCheckOptions, Graph, InitRule, ParamStore, Tensor};
use bve_core::registration::{PreservationMask, RigidTransform};
use bve_core::voxel::DenseGrid;
use bve_core::Result;
use proptest::prelude::*;
use rand::Rng;

fn rt(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

#[test]
fn logit_normal_moments() {
    let mut r = rng(1);
    let mut ts: Vec<f64> = (0..100_000).map(|_| sample_t_logit_normal(0.0, 1.0, &mut r).unwrap()).collect();
    ts.sort_by(f64::total_cmp);
    assert!((ts[50_000] - 0.5).abs() < 0.01);
    let m = (0..100_000).map(|_| logit(sample_t_logit_normal(1.0, 1.0, &mut r).unwrap())).sum::<f64>() / 1e5;
    assert!((m - 1.0).abs() < 0.02, "{m}");
    assert!((0..1_000_000).all(|_| {
        let t = sample_t_logit_normal(0.0, 1.0, &mut r).unwrap();
        t > 0.0 && t < 1.0
    }));
    assert!(sample_t_logit_normal(0.0, 0.0, &mut r).is_err());
}

#[test]
fn interpolation_endpoints() {
    let (x0, e) = (rt(&[3, 2], 1), rt(&[3, 2], 2));
    assert_eq!(interpolate(&x0, &e, 0.0).unwrap(), x0);
    assert_eq!(interpolate(&x0, &e, 1.0).unwrap(), e);
    let mid = interpolate(&Tensor::zeros(&[1, 1]), &Tensor::full(&[1, 1], 2.0), 0.5).unwrap();
    assert_eq!(mid.data(), &[1.0]);
    assert!(interpolate(&x0, &e, 1.5).is_err());
    assert!(interpolate(&x0, &rt(&[2, 3], 3), 0.5).is_err());
}

#[test]
fn cfm_loss_examples() {
    let (x0, e) = (rt(&[4, 3], 1), rt(&[4, 3], 2));
    let target = Tensor::new(&[4, 3], e.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect()).unwrap();
    assert_eq!(cfm_loss(&target, &x0, &e).unwrap(), 0.0);
    let ones = Tensor::full(&[4, 3], 1.0);
    assert_eq!(cfm_loss(&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 3]), &ones).unwrap(), 1.0);
}

fn sample(n: usize, c: usize, mask: Vec<f64>, seed: u64) -> FlowSample {
    FlowSample::new(rt(&[n, c], seed), rt(&[n, c], seed + 1), rt(&[n, c], seed + 2), 0.3, mask).unwrap()
}

#[test]
fn edit_loss_examples() {
    let s = sample(5, 2, vec![0.0; 5], 10);
    let v = rt(&[5, 2], 20);
    assert_eq!(edit_loss(&v, &s).unwrap(), cfm_loss(&v, &s.x0_edit, &s.eps).unwrap());

    let x0 = rt(&[4, 2], 30);
    let s = FlowSample::new(x0.clone(), x0.clone(), rt(&[4, 2], 31), 0.5, vec![1.0; 4]).unwrap();
    assert_eq!(edit_loss(&s.v_edit().unwrap(), &s).unwrap(), 0.0);

    // two voxels, two channels, mask = {A}: second term sees only A's channels
    let s = FlowSample::new(
        Tensor::new(&[2, 2], vec![0.0; 4]).unwrap(),
        Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        Tensor::zeros(&[2, 2]),
        0.5,
        vec![1.0, 0.0],
    )
    .unwrap();
    let v = Tensor::zeros(&[2, 2]);
    // v_e = 0, v_o = −x0_orig; second term = (1 + 4) / 4
    assert_eq!(edit_loss(&v, &s).unwrap(), 1.25);
}

#[test]
fn dense_sample_requires_matching_mask() {
    let g = DenseGrid::unit(4, 2).unwrap();
    let m = PreservationMask::new(4, vec![true; 64], 1.0, RigidTransform::identity()).unwrap();
    let s = FlowSample::dense(&g, &g, Tensor::zeros(&[64, 2]), 0.2, &m).unwrap();
    assert_eq!(s.mask.len(), 64);
    let m8 = PreservationMask::new(8, vec![false; 512], 1.0, RigidTransform::identity()).unwrap();
    assert!(FlowSample::dense(&g, &g, Tensor::zeros(&[64, 2]), 0.2, &m8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edit_loss_dominates_cfm(seed in 0u64..10_000, n in 1usize..8, bits in prop::collection::vec(any::<bool>(), 8)) {
        let mask = bits[..n].iter().map(|&b| f64::from(u8::from(b))).collect();
        let s = sample(n, 3, mask, seed);
        let v = rt(&[n, 3], seed + 9);
        prop_assert!(edit_loss(&v, &s).unwrap() >= cfm_loss(&v, &s.x0_edit, &s.eps).unwrap());
    }

    #[test]
    fn cfm_loss_is_permutation_invariant(seed in 0u64..10_000, n in 1usize..10) {
        let (v, x, e) = (rt(&[n, 1], seed), rt(&[n, 1], seed + 1), rt(&[n, 1], seed + 2));
        let perm: Vec<usize> = (0..n).rev().collect();
        let p = |t: &Tensor| Tensor::new(&[n, 1], perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        let (a, b) = (cfm_loss(&v, &x, &e).unwrap(), cfm_loss(&p(&v), &p(&x), &p(&e)).unwrap());
        prop_assert!((a - b).abs() <= 1e-15 * a.max(1.0));
    }
}

#[test]
fn loss_graphs_match_and_differentiate() {
    let s = sample(4, 3, vec![1.0, 0.0, 1.0, 0.0], 40);
    let mut store = ParamStore::new();
    store.insert("w", rt(&[3, 3], 41), InitRule::Standard).unwrap();
    let x_t = s.x_t.clone();
    let model = |g: &mut Graph, st: &ParamStore| -> Result<_> {
        let x = g.constant(x_t.clone());
        let w = g.param(st, "w")?;
        let h = g.matmul(x, w)?;
        Ok(g.silu(h))
    };
    let mut g = Graph::new();
    let v = model(&mut g, &store).unwrap();
    let vt = g.value(v).clone();
    let e = edit_loss_graph(&mut g, v, &s, true).unwrap();
    let c = cfm_loss_graph(&mut g, v, &s.x0_edit, &s.eps).unwrap();
    assert!((g.value(e).data()[0] - edit_loss(&vt, &s).unwrap()).abs() < 1e-14);
    assert!((g.value(c).data()[0] - cfm_loss(&vt, &s.x0_edit, &s.eps).unwrap()).abs() < 1e-14);
    let opts = GradCheckOptions { h: 1e-5, floor: 1e-4, coords_per_param: None, seed: 0 };
    for masked in [true, false] {
        let rep = grad_check_with(&store, opts, |g, st| {
            let v = model(g, st)?;
            edit_loss_graph(g, v, &s, masked)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }
}

#[test]
fn dropout_rates() {
    let mut r = rng(5);
    let hits = (0..100_000).filter(|_| draw_dropout(0.1, DropMode::Joint, &mut r).unwrap().any()).count();
    assert!((hits as f64 / 1e5 - 0.1).abs() < 0.005, "{hits}");
    let d = (0..100_000).map(|_| draw_dropout(0.1, DropMode::Independent, &mut r).unwrap());
    let (img, txt) = d.fold((0, 0), |(a, b), d| (a + d.img as usize, b + d.txt as usize));
    assert!((img as f64 / 1e5 - 0.1).abs() < 0.005 && (txt as f64 / 1e5 - 0.1).abs() < 0.005);
    assert!(draw_dropout(1.0, DropMode::Joint, &mut r).is_err());

    let b = ConditioningBundle::new(rt(&[3, 4], 1), rt(&[2, 4], 2)).unwrap();
    let (ni, nt) = (rt(&[1, 4], 3), rt(&[1, 4], 4));
    for _ in 0..100 {
        assert_eq!(cfg_dropout(&b, &ni, &nt, 0.0, DropMode::Joint, &mut r).unwrap().0, b);
    }
    let dropped = (0..200).map(|_| cfg_dropout(&b, &ni, &nt, 0.5, DropMode::Joint, &mut r).unwrap()).find(|(_, d)| d.any()).unwrap().0;
    assert_eq!((dropped.c_img(), dropped.c_txt()), (&ni, &nt));
}

// ---- sampler -------------------------------------------------------------------

struct Constant(f64);
impl VelocityField for Constant {
    type Cond = ConditioningBundle;
    fn velocity(&self, x: &Tensor, _t: f64, _b: Option<&ConditioningBundle>) -> Result<Tensor> {
        Ok(Tensor::full(x.shape(), self.0))
    }
}

struct Linear;
impl VelocityField for Linear {
    type Cond = ConditioningBundle;
    fn velocity(&self, x: &Tensor, _t: f64, _b: Option<&ConditioningBundle>) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Conditional and unconditional fields differ by a constant offset.
struct Split;
impl VelocityField for Split {
    type Cond = ConditioningBundle;
    fn velocity(&self, x: &Tensor, t: f64, b: Option<&ConditioningBundle>) -> Result<Tensor> {
        Ok(x.map(|v| 0.5 * v + t + if b.is_some() { 1.0 } else { 0.0 }))
    }
}

struct Wrong;
impl VelocityField for Wrong {
    type Cond = ConditioningBundle;
    fn velocity(&self, _x: &Tensor, _t: f64, _b: Option<&ConditioningBundle>) -> Result<Tensor> {
        Ok(Tensor::zeros(&[1, 1]))
    }
}

fn bundle() -> ConditioningBundle {
    ConditioningBundle::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])).unwrap()
}

#[test]
fn constant_field_is_integrated_exactly() {
    let eps = rt(&[6, 2], 7);
    for steps in [1, 4, 25, 100] {
        for s in [0.0, 1.0, 3.0] {
            let x = euler_sample_cfg(&Constant(0.7), &bundle(), &SamplerConfig { steps, cfg_scale: s }, &eps).unwrap();
            assert!(x.data().iter().zip(eps.data()).all(|(a, e)| (a - (e - 0.7)).abs() < 1e-13));
        }
    }
}

#[test]
fn euler_converges_at_first_order() {
    let eps = Tensor::full(&[1, 1], 1.0);
    // dx/dt = x from t = 1 to 0: x(0) = ε·e⁻¹
    let exact = (-1.0f64).exp();
    let err = |steps| (euler_sample_cfg(&Linear, &bundle(), &SamplerConfig { steps, cfg_scale: 3.0 }, &eps).unwrap().data()[0] - exact).abs();
    for steps in [25, 50, 100] {
        let ratio = err(steps) / err(2 * steps);
        assert!((ratio - 2.0).abs() < 0.2, "{steps}: {ratio}");
    }
}

#[test]
fn guidance_behaviour() {
    let eps = rt(&[3, 2], 8);
    let run = |m: &dyn Fn(&SamplerConfig) -> Tensor, s| m(&SamplerConfig { steps: 10, cfg_scale: s });
    let lin = |c: &SamplerConfig| euler_sample_cfg(&Linear, &bundle(), c, &eps).unwrap();
    assert_eq!(run(&lin, 0.0), run(&lin, 7.5));
    assert_eq!(run(&lin, 1.0), run(&lin, 3.0));
    let split = |c: &SamplerConfig| euler_sample_cfg(&Split, &bundle(), c, &eps).unwrap();
    assert_ne!(run(&split, 1.0), run(&split, 3.0));
    assert_eq!(run(&split, 2.0), run(&split, 2.0));
    // scale 1 equals conditional-only integration
    let mut x = eps.clone();
    for k in 0..10 {
        let v = Split.velocity(&x, 1.0 - k as f64 * 0.1, Some(&bundle())).unwrap();
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a -= 0.1 * b);
    }
    assert_eq!(run(&split, 1.0), x);
    assert!(euler_sample_cfg(&Wrong, &bundle(), &SamplerConfig::default(), &eps).is_err());
    assert!(SamplerConfig { steps: 0, cfg_scale: 1.0 }.validate().is_err());
    assert!(SamplerConfig { steps: 1, cfg_scale: -1.0 }.validate().is_err());
}
