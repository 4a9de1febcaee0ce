use bve_core::blocks::{timestep_embedding, tri_attention_block, ConditioningBundle, LN_EPS};
use bve_core::flow::{euler_sample_cfg, DropDecision, FlowSample, SamplerConfig};
use bve_core::models::{
    batch_loss, edit_pipeline, guidance_drop, predict, train_step, BoundNet, CondInput, EditModel, FlowNet, NetInput, SlatNet, SlatNetConfig, Stage,
    StructureNet, StructureNetConfig, TrainConfig, TrainExample, TrainPair, Trainer, TIME_FREQ_DIM,
};
use bve_core::numcore::{grad_check_with, rng, GradCheckOptions, ParamStore, Rng as ChaRng, Tensor};
use bve_core::registration::MaskConfig;
use bve_core::synth::{load_corpus, write_corpus, EditInstruction, Shape, IMAGE_TOKENS};
use bve_core::voxel::conv::tap_offset;
use bve_core::voxel::patch::{patchify, position_embedding, unpatchify, TokenSequence};
use bve_core::voxel::{Coord, DenseGrid, SparseVoxelTensor};
use rand::Rng;

fn rand_tensor(r: &mut ChaRng, shape: &[usize], amp: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-amp..amp))
}

fn perturb(st: &mut ParamStore, seed: u64, amp: f64) {
    let mut r = rng(seed);
    for (_, t) in st.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-amp..amp));
    }
}

fn small_structure(resolution: usize, channels: usize, patch: usize) -> StructureNet {
    StructureNet::new("ss", StructureNetConfig { resolution, channels, patch, dim: 12, heads: 2, blocks: 2, rank: 2, ff_mult: 2 }).unwrap()
}

fn small_slat() -> SlatNet {
    SlatNet::new(
        "slat",
        SlatNetConfig { resolution: 8, channels: 3, widths: vec![4, 6], levels: 1, bottleneck_blocks: 1, heads: 2, ff_mult: 2, cond_resolution: 4 },
    )
    .unwrap()
}

fn random_grid(r: &mut ChaRng, res: usize, channels: usize) -> DenseGrid {
    let n = res.pow(3) * channels;
    DenseGrid::unit(res, channels).unwrap().with_values(channels, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_sites(r: &mut ChaRng, res: usize, n: usize) -> Vec<Coord> {
    let mut c: Vec<Coord> = (0..n).map(|_| [0; 3].map(|_: u16| r.random_range(0..res as u16))).collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn random_sparse(r: &mut ChaRng, res: usize, channels: usize, n: usize) -> SparseVoxelTensor {
    let coords = random_sites(r, res, n);
    let feats = (0..coords.len() * channels).map(|_| r.random_range(-1.0..1.0)).collect();
    SparseVoxelTensor::new(res, channels, coords, feats).unwrap()
}

fn random_bundle(r: &mut ChaRng, dim: usize) -> ConditioningBundle {
    ConditioningBundle::new(rand_tensor(r, &[5, dim], 1.0), rand_tensor(r, &[3, dim], 1.0)).unwrap()
}

fn cond_input(r: &mut ChaRng, width: usize) -> CondInput {
    CondInput { image: rand_tensor(r, &[IMAGE_TOKENS, width], 1.0), tokens: vec![2, 7, 18] }
}

// ---- plain reference arithmetic -------------------------------------------

fn mm(a: &Tensor, w: &[f64], dout: usize) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    assert_eq!(w.len(), k * dout);
    Tensor::from_fn(&[n, dout], |i| {
        let (row, col) = (i / dout, i % dout);
        (0..k).map(|p| a.data()[row * k + p] * w[p * dout + col]).sum()
    })
}

fn linear(st: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let w = st.get(&format!("{name}.w")).unwrap();
    let b = st.get(&format!("{name}.b")).unwrap();
    let mut y = mm(x, w.data(), w.shape()[1]);
    let d = y.cols();
    y.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += b.data()[i % d]);
    y
}

/// One sparse-conv tap used as a dense map on a single row.
fn conv_tap(st: &ParamStore, name: &str, tap: usize, x: &Tensor) -> Tensor {
    let w = st.get(&format!("{name}.w")).unwrap();
    let (cin, cout) = (w.shape()[1], w.shape()[2]);
    let b = st.get(&format!("{name}.b")).unwrap();
    let mut y = mm(x, &w.data()[tap * cin * cout..(tap + 1) * cin * cout], cout);
    y.data_mut().iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
    y
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

fn layer_norm(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()));
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn time_embedding(st: &ParamStore, prefix: &str, t: f64) -> Tensor {
    let e = Tensor::new(&[1, TIME_FREQ_DIM], timestep_embedding(t, TIME_FREQ_DIM)).unwrap();
    let h = map(&linear(st, &format!("{prefix}.cond.time.fc1"), &e), silu);
    linear(st, &format!("{prefix}.cond.time.fc2"), &h)
}

fn final_layer(st: &ParamStore, prefix: &str, h: &Tensor, temb: &Tensor) -> Tensor {
    let d = h.cols();
    let m = linear(st, &format!("{prefix}.head.mod"), &map(temb, silu));
    let n = layer_norm(h);
    let mod_h = Tensor::from_fn(h.shape(), |i| {
        let j = i % d;
        n.data()[i] * (1.0 + m.data()[d + j]) + m.data()[j]
    });
    linear(st, &format!("{prefix}.head.out"), &mod_h)
}

fn res_block(st: &ParamStore, name: &str, tap: usize, x: &Tensor, temb: &Tensor) -> Tensor {
    let h = conv_tap(st, &format!("{name}.conv1"), tap, &map(&layer_norm(x), silu));
    let h = add(&h, &linear(st, &format!("{name}.time"), &map(temb, silu)));
    let h = conv_tap(st, &format!("{name}.conv2"), tap, &map(&layer_norm(&h), silu));
    add(x, &h)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "element {i}: {x} vs {y}");
    }
}

// ---- zero initialization ---------------------------------------------------

#[test]
fn fresh_structure_net_outputs_exact_zero() {
    let net = small_structure(8, 1, 2);
    let st = net.init_params(&mut rng(1)).unwrap();
    let mut r = rng(2);
    let x = random_grid(&mut r, 8, 1);
    let out = net.forward(&st, &x, 0.37, &random_bundle(&mut r, 12)).unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));
    let cond = cond_input(&mut r, 4);
    let xt = Tensor::new(&[512, 1], x.values().to_vec()).unwrap();
    for drop in [guidance_drop(true), guidance_drop(false), DropDecision { img: true, txt: false }] {
        let v = predict(&net, &st, &[NetInput { x: &xt, coords: &[], t: 0.8, cond: &cond, drop }]).unwrap();
        assert!(v[0].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fresh_slat_net_outputs_zero_on_same_sites() {
    let net = small_slat();
    let st = net.init_params(&mut rng(3)).unwrap();
    let mut r = rng(4);
    let x = random_sparse(&mut r, 8, 3, 40);
    let out = net.forward(&st, &x, 0.6, &random_bundle(&mut r, 6)).unwrap();
    assert_eq!(out.coords(), x.coords());
    assert!(out.feats().iter().all(|&v| v == 0.0));
}

#[test]
fn untrained_sampler_returns_the_noise() {
    let net = small_structure(4, 1, 2);
    let st = net.init_params(&mut rng(5)).unwrap();
    let mut r = rng(6);
    let eps = rand_tensor(&mut r, &[64, 1], 2.0);
    let cond = cond_input(&mut r, 1);
    let out = euler_sample_cfg(&BoundNet { net: &net, params: &st, coords: &[] }, &cond, &SamplerConfig::default(), &eps).unwrap();
    assert_eq!(out, eps);
}

// ---- contracts ---------------------------------------------------------------

#[test]
fn structure_output_shape_matches_input() {
    let net = small_structure(8, 2, 2);
    let mut st = net.init_params(&mut rng(7)).unwrap();
    perturb(&mut st, 8, 0.3);
    let mut r = rng(9);
    let x = random_grid(&mut r, 8, 2);
    let out = net.forward(&st, &x, 0.5, &random_bundle(&mut r, 12)).unwrap();
    assert_eq!((out.resolution(), out.channels()), (8, 2));
    assert!(out.values().iter().any(|&v| v != 0.0));
    assert!(net.forward(&st, &random_grid(&mut r, 4, 2), 0.5, &random_bundle(&mut r, 12)).is_err());
    assert!(net.forward(&st, &x, 0.5, &random_bundle(&mut r, 8)).is_err());
}

#[test]
fn slat_net_preserves_sites_and_handles_empty() {
    let net = small_slat();
    let mut st = net.init_params(&mut rng(10)).unwrap();
    perturb(&mut st, 11, 0.3);
    let mut r = rng(12);
    for n in [1, 7, 60] {
        let x = random_sparse(&mut r, 8, 3, n);
        let out = net.forward(&st, &x, 0.4, &random_bundle(&mut r, 6)).unwrap();
        assert_eq!(out.coords(), x.coords());
        assert!(out.feats().iter().any(|&v| v != 0.0));
    }
    let empty = SparseVoxelTensor::empty(8, 3);
    assert_eq!(net.forward(&st, &empty, 0.4, &random_bundle(&mut r, 6)).unwrap(), empty);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_patch = StructureNetConfig { resolution: 16, patch: 3, ..Default::default() };
    assert!(StructureNet::new("s", bad_patch).is_err());
    let bad_heads = StructureNetConfig { dim: 30, heads: 4, ..Default::default() };
    assert!(StructureNet::new("s", bad_heads).is_err());
    let asym = SlatNetConfig { widths: vec![8, 16, 32], levels: 1, ..Default::default() };
    assert!(SlatNet::new("s", asym).is_err());
    assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { drop_rate: 1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn configs_default_and_reject_unknown_keys() {
    let s = StructureNetConfig::default();
    assert_eq!((s.resolution, s.patch, s.dim, s.heads, s.blocks), (16, 2, 64, 4, 4));
    let l = SlatNetConfig::default();
    assert_eq!((l.widths.clone(), l.levels, l.bottleneck_blocks), (vec![32, 64], 1, 2));
    let t = TrainConfig::default();
    assert_eq!((t.lr, t.drop_rate, t.mu_structure, t.mu_slat, t.clip_cap), (1e-4, 0.1, 0.0, 1.0, 2.0));
    assert!(!t.freeze_self_attention);
    let parsed: TrainConfig = serde_json::from_str(r#"{"steps": 5, "use_mask": false}"#).unwrap();
    assert_eq!((parsed.steps, parsed.use_mask, parsed.lr), (5, false, 1e-4));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    assert!(serde_json::from_str::<SlatNetConfig>(r#"{"width": [1]}"#).is_err());
}

// ---- straight-line oracles ------------------------------------------------------

#[test]
fn structure_net_matches_composition_of_block_oracles() {
    for seed in 0..3 {
        let net = small_structure(4, 2, 2);
        let mut st = net.init_params(&mut rng(seed)).unwrap();
        perturb(&mut st, seed + 100, 0.4);
        let mut r = rng(seed + 200);
        let x = random_grid(&mut r, 4, 2);
        let bundle = random_bundle(&mut r, 12);
        let t = 0.3 + 0.2 * seed as f64;
        let got = net.forward(&st, &x, t, &bundle).unwrap();

        let temb = time_embedding(&st, "ss", t);
        let tokens = patchify(&x, 2, Some(st.get("ss.embed.w").unwrap()), true).unwrap();
        let bias = st.get("ss.embed.b").unwrap();
        let mut h = Tensor::from_fn(tokens.tokens.shape(), |i| tokens.tokens.data()[i] + bias.data()[i % 12]);
        for block in &net.blocks {
            h = tri_attention_block(block, &st, &h, &bundle, temb.data()).unwrap();
        }
        let out = final_layer(&st, "ss", &h, &temb);
        let want = unpatchify(&TokenSequence::new(out, [2; 3]).unwrap(), 2, 2).unwrap();
        assert_close(got.values(), want.values(), 1e-12);
    }
}

#[test]
fn single_site_slat_matches_reduced_path() {
    let net = small_slat();
    for (seed, c) in [(0u64, [5u16, 2, 7]), (1, [0, 0, 0]), (2, [7, 7, 6])] {
        let mut st = net.init_params(&mut rng(seed)).unwrap();
        perturb(&mut st, seed + 50, 0.4);
        let mut r = rng(seed + 60);
        let feats: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = SparseVoxelTensor::new(8, 3, vec![c], feats.clone()).unwrap();
        let bundle = random_bundle(&mut r, 6);
        let t = 0.45;
        let got = net.forward(&st, &x, t, &bundle).unwrap();

        let parent = c.map(|v| v / 2);
        let off = [0, 1, 2].map(|a| i32::from(c[a]) - 2 * i32::from(parent[a]));
        let tap = (0..27).find(|&k| tap_offset(k) == off).unwrap();
        let centre = (0..27).find(|&k| tap_offset(k) == [0, 0, 0]).unwrap();
        let temb = time_embedding(&st, "slat", t);
        let h = linear(&st, "slat.input", &Tensor::new(&[1, 3], feats).unwrap());
        let skip = res_block(&st, "slat.enc.0", centre, &h, &temb);
        let h = conv_tap(&st, "slat.down.0", tap, &skip);
        let h = res_block(&st, "slat.enc.1", centre, &h, &temb);
        let h = add(&h, &position_embedding(&[parent.map(usize::from)], 6));
        let h = tri_attention_block(&net.blocks[0], &st, &h, &bundle, temb.data()).unwrap();
        let u = conv_tap(&st, "slat.up.0", tap, &h);
        let cat = Tensor::new(&[1, 8], u.data().iter().chain(skip.data()).copied().collect()).unwrap();
        let h = linear(&st, "slat.fuse.0", &cat);
        let h = res_block(&st, "slat.dec.0", centre, &h, &temb);
        let want = final_layer(&st, "slat", &h, &temb);
        assert_eq!(got.coords(), &[c]);
        assert_close(got.feats(), want.data(), 1e-12);
    }
}

#[test]
fn structure_net_is_rotation_equivariant_with_rotated_lattice() {
    let net = small_structure(4, 1, 1);
    let mut st = net.init_params(&mut rng(20)).unwrap();
    perturb(&mut st, 21, 0.4);
    let mut r = rng(22);
    let x = random_grid(&mut r, 4, 1);
    let bundle = random_bundle(&mut r, 12);
    let rot = |p: [usize; 3]| [3 - p[1], p[0], p[2]];
    let idx = |p: [usize; 3]| (p[0] * 4 + p[1]) * 4 + p[2];
    let cells: Vec<[usize; 3]> = (0..64).map(|i| [i / 16, (i / 4) % 4, i % 4]).collect();

    let mut xr = x.clone();
    let mut rotated = net.clone();
    for &p in &cells {
        xr.values_mut()[idx(rot(p))] = x.values()[idx(p)];
        let d = net.ape.cols();
        let src = net.ape.data()[idx(p) * d..(idx(p) + 1) * d].to_vec();
        rotated.ape.data_mut()[idx(rot(p)) * d..(idx(rot(p)) + 1) * d].copy_from_slice(&src);
    }
    let y = net.forward(&st, &x, 0.55, &bundle).unwrap();
    let yr = rotated.forward(&st, &xr, 0.55, &bundle).unwrap();
    for &p in &cells {
        assert!((yr.values()[idx(rot(p))] - y.values()[idx(p)]).abs() < 1e-12);
    }
}

// ---- training ------------------------------------------------------------------

fn example<'a>(r: &mut ChaRng, rows: usize, channels: usize, coords: &'a [Coord], cond: &'a CondInput, drop: DropDecision) -> TrainExample<'a> {
    let edit = rand_tensor(r, &[rows, channels], 1.0);
    let orig = rand_tensor(r, &[rows, channels], 1.0);
    let eps = rand_tensor(r, &[rows, channels], 1.0);
    let mask = (0..rows).map(|i| f64::from(u8::from(i % 3 != 0))).collect();
    let t = r.random_range(0.05..0.95);
    TrainExample { sample: FlowSample::new(edit, orig, eps, t, mask).unwrap(), coords, cond, drop }
}

#[test]
fn structure_train_step_gradients_match_finite_differences() {
    let net = small_structure(4, 1, 2);
    for seed in 0..3 {
        let mut st = net.init_params(&mut rng(seed)).unwrap();
        perturb(&mut st, seed + 30, 0.3);
        let mut r = rng(seed + 40);
        let (c1, c2) = (cond_input(&mut r, 1), cond_input(&mut r, 1));
        let batch = [example(&mut r, 64, 1, &[], &c1, guidance_drop(true)), example(&mut r, 64, 1, &[], &c2, DropDecision { img: true, txt: false })];
        let rep =
            grad_check_with(&st, GradCheckOptions { h: 1e-5, floor: 1e-4, coords_per_param: Some(6), seed }, |g, st| batch_loss(&net, g, st, &batch, true))
                .unwrap();
        assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
    }
}

#[test]
fn slat_train_step_gradients_match_finite_differences() {
    let net = small_slat();
    for seed in 0..3 {
        let mut st = net.init_params(&mut rng(seed)).unwrap();
        perturb(&mut st, seed + 70, 0.3);
        let mut r = rng(seed + 80);
        let (s1, s2) = (random_sites(&mut r, 8, 12), random_sites(&mut r, 8, 9));
        let (c1, c2) = (cond_input(&mut r, 1), cond_input(&mut r, 1));
        let batch = [example(&mut r, s1.len(), 3, &s1, &c1, guidance_drop(true)), example(&mut r, s2.len(), 3, &s2, &c2, guidance_drop(false))];
        let rep =
            grad_check_with(&st, GradCheckOptions { h: 1e-5, floor: 1e-4, coords_per_param: Some(6), seed }, |g, st| batch_loss(&net, g, st, &batch, true))
                .unwrap();
        assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let net = small_structure(4, 1, 2);
    let mut st = net.init_params(&mut rng(1)).unwrap();
    let before = st.clone();
    let mut r = rng(2);
    let cond = cond_input(&mut r, 1);
    let batch = [example(&mut r, 64, 1, &[], &cond, guidance_drop(true))];
    let cfg = TrainConfig { lr: 0.0, ..Default::default() };
    let mut opt = cfg.optimizer();
    let rep = train_step(&net, &mut st, &mut opt, &batch, &cfg).unwrap();
    assert!(rep.loss > 0.0 && rep.loss.is_finite());
    for (name, t) in before.iter() {
        assert_eq!(st.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn repeated_steps_on_fixed_batch_decrease_loss() {
    let net = small_structure(4, 1, 2);
    let mut st = net.init_params(&mut rng(3)).unwrap();
    let mut r = rng(4);
    let cond = cond_input(&mut r, 1);
    let batch = [example(&mut r, 64, 1, &[], &cond, guidance_drop(true)), example(&mut r, 64, 1, &[], &cond, guidance_drop(true))];
    let cfg = TrainConfig { lr: 1e-3, ..Default::default() };
    let mut opt = cfg.optimizer();
    let losses: Vec<f64> = (0..50).map(|_| train_step(&net, &mut st, &mut opt, &batch, &cfg).unwrap().loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn frozen_self_attention_stays_fixed() {
    let net = small_structure(4, 1, 2);
    let mut st = net.init_params(&mut rng(5)).unwrap();
    let before = st.clone();
    let mut r = rng(6);
    let cond = cond_input(&mut r, 1);
    let batch = [example(&mut r, 64, 1, &[], &cond, guidance_drop(true))];
    let cfg = TrainConfig { lr: 1e-2, freeze_self_attention: true, ..Default::default() };
    let mut opt = cfg.optimizer();
    for _ in 0..3 {
        train_step(&net, &mut st, &mut opt, &batch, &cfg).unwrap();
    }
    let prefixes = net.self_attention_prefixes();
    for (name, t) in before.iter() {
        let frozen = prefixes.iter().any(|p| name.starts_with(p.as_str()));
        if frozen {
            assert_eq!(st.get(name).unwrap(), t, "{name}");
        }
    }
    assert_ne!(st.get("ss.head.out.w").unwrap(), before.get("ss.head.out.w").unwrap());
}

fn synthetic_pairs(r: &mut ChaRng, n: usize) -> Vec<TrainPair> {
    (0..n)
        .map(|_| TrainPair {
            edit: Tensor::from_fn(&[64, 1], |_| f64::from(u8::from(r.random_bool(0.3)))),
            orig: Tensor::from_fn(&[64, 1], |_| f64::from(u8::from(r.random_bool(0.3)))),
            mask: (0..64).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect(),
            coords: Vec::new(),
            cond: cond_input(r, 1),
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let net = small_structure(4, 1, 2);
    let pairs = synthetic_pairs(&mut rng(7), 5);
    let cfg = TrainConfig { batch: 3, steps: 6, seed: 11, ..Default::default() };
    let run = || Trainer::new(&net, cfg, Stage::Structure).unwrap().run(&pairs, |_, _| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let other = Trainer::new(&net, TrainConfig { seed: 12, ..cfg }, Stage::Structure).unwrap().run(&pairs, |_, _| {}).unwrap();
    assert_ne!(a, other);
}

#[test]
fn corpus_items_become_training_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 3, 5, &MaskConfig::default()).unwrap();
    let (_, items) = load_corpus(dir.path()).unwrap();
    for item in &items {
        let s = TrainPair::structure(item).unwrap();
        assert_eq!(s.edit.shape(), &[4096, 1]);
        assert_eq!(s.mask, item.mask16.to_weights());
        assert_eq!(s.cond.image.shape(), &[IMAGE_TOKENS, 16]);
        let l = TrainPair::slat(item).unwrap();
        assert_eq!(l.coords, item.edit_slat.coords());
        for (i, c) in l.coords.iter().enumerate() {
            let bit = item.mask16.get(c[0] as usize / 2, c[1] as usize / 2, c[2] as usize / 2);
            assert_eq!(l.mask[i], f64::from(u8::from(bit)));
            let want: Vec<f64> = item.orig_slat.find(c).map_or(vec![0.0; 8], |j| item.orig_slat.row(j).to_vec());
            assert_eq!(&l.orig.data()[i * 8..(i + 1) * 8], want.as_slice());
        }
    }
}

// ---- pipeline ------------------------------------------------------------------

#[test]
fn pipeline_runs_both_stages_deterministically() {
    let ss = small_structure(8, 1, 2);
    let slat = SlatNet::new(
        "slat",
        SlatNetConfig { resolution: 16, channels: 3, widths: vec![4, 6], levels: 1, bottleneck_blocks: 1, heads: 2, ff_mult: 2, cond_resolution: 8 },
    )
    .unwrap();
    let mut sp = ss.init_params(&mut rng(1)).unwrap();
    let mut lp = slat.init_params(&mut rng(2)).unwrap();
    perturb(&mut sp, 3, 0.05);
    perturb(&mut lp, 4, 0.05);
    let model = EditModel { structure: &ss, structure_params: &sp, slat: &slat, slat_params: &lp };
    let mut orig = DenseGrid::unit(8, 1).unwrap();
    for i in 0..orig.values().len() {
        let c = orig.coord_of(i);
        if c.iter().all(|&v| (2..6).contains(&v)) {
            orig.values_mut()[i] = 1.0;
        }
    }
    let instr = EditInstruction::Remove { shape: Shape::Sphere };
    let sampler = SamplerConfig::default();
    let a = edit_pipeline(&model, &orig, &instr, &sampler, 9).unwrap();
    let b = edit_pipeline(&model, &orig, &instr, &sampler, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.structure.values().iter().all(|&v| v == 0.0 || v == 1.0));
    let occupied = a.structure.occupied(0, 0.5).len();
    assert!(occupied > 0);
    assert_eq!(a.slat.len(), 8 * occupied);
    assert_eq!(a.slat.resolution(), 16);
    assert_ne!(edit_pipeline(&model, &orig, &instr, &sampler, 10).unwrap(), a);
    assert!(edit_pipeline(&model, &DenseGrid::unit(4, 1).unwrap(), &instr, &sampler, 9).is_err());
}
