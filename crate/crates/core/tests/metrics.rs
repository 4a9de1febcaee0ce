use bve_core::error::Error;
use bve_core::metrics::*;
use bve_core::voxel::{Point, PointCloud};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
}

fn directed(x: &[Point], y: &[Point]) -> f64 {
    let d2 = |p: &Point, q: &Point| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
    x.iter().map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
}

fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
    directed(a, b) + directed(b, a)
}

/// Two-pass centred SSIM evaluated window by window.
fn reference_ssim(x: &Image, y: &Image, w: usize, range: f64) -> f64 {
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut vals = Vec::new();
    for c in 0..x.channels {
        for i in 0..=x.height - w {
            for j in 0..=x.width - w {
                let px: Vec<f64> = (0..w * w).map(|k| x.get(i + k / w, j + k % w, c)).collect();
                let py: Vec<f64> = (0..w * w).map(|k| y.get(i + k / w, j + k % w, c)).collect();
                let n = px.len() as f64;
                let mx = px.iter().sum::<f64>() / n;
                let my = py.iter().sum::<f64>() / n;
                let vx = px.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
                let vy = py.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
                let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                vals.push(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn gradient() -> Image {
    Image::from_fn(8, 8, |i, j| (i + j) as f64 / 14.0)
}

#[test]
fn chamfer_single_points() {
    let a = PointCloud(vec![[0.0, 0.0, 0.0]]);
    let b = PointCloud(vec![[1.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
}

#[test]
fn chamfer_matches_brute_force() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (cloud(&mut rng, 60), cloud(&mut rng, 45));
        let got = chamfer(&a, &b).unwrap();
        assert!((got - brute_chamfer(a.points(), b.points())).abs() < 1e-12);
        assert!((got - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn chamfer_rejects_empty() {
    let a = PointCloud(vec![[0.0; 3]]);
    assert!(matches!(chamfer(&a, &PointCloud(vec![])), Err(Error::Domain(_))));
    assert!(matches!(chamfer(&PointCloud(vec![]), &a), Err(Error::Domain(_))));
}

#[test]
fn subsample_is_distinct_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pc = PointCloud((0..100).map(|i| [i as f64, 0.0, 0.0]).collect());
    let s = subsample(&pc, 30, &mut rng);
    assert_eq!(s.len(), 30);
    let mut xs: Vec<i64> = s.points().iter().map(|p| p[0] as i64).collect();
    xs.dedup();
    assert_eq!(xs.len(), 30);
    assert_eq!(subsample(&pc, 200, &mut rng), pc);
}

#[test]
fn ssim_identical_is_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Image::from_fn(12, 9, |_, _| 0.0).data.iter().map(|_| rng.random::<f64>()).collect();
    let x = Image::new(12, 9, 1, x).unwrap();
    assert_eq!(ssim_default(&ImagePair::new(&x, &x, 1.0).unwrap()).unwrap(), 1.0);
}

#[test]
fn ssim_inverted_gradient_is_negative() {
    let x = gradient();
    let y = Image::from_fn(8, 8, |i, j| 1.0 - x.get(i, j, 0));
    let s = ssim_default(&ImagePair::new(&x, &y, 1.0).unwrap()).unwrap();
    let mx = 0.5;
    let vx = (0..64).map(|k| (((k / 8 + k % 8) as f64 / 14.0) - mx).powi(2)).sum::<f64>() / 64.0;
    let (c1, c2) = (1e-4, 9e-4);
    let hand = ((2.0 * mx * mx + c1) * (-2.0 * vx + c2)) / ((2.0 * mx * mx + c1) * (2.0 * vx + c2));
    assert!(s < 0.0);
    assert!((s - hand).abs() < 1e-12);
}

#[test]
fn ssim_constant_images_degrade_luminance_only() {
    let (a, c) = (0.3, 0.25);
    let x = Image::from_fn(8, 8, |_, _| a);
    let y = Image::from_fn(8, 8, |_, _| a + c);
    let s = ssim_default(&ImagePair::new(&x, &y, 1.0).unwrap()).unwrap();
    let c1 = (0.01f64).powi(2);
    let hand = (2.0 * a * (a + c) + c1) / (a * a + (a + c) * (a + c) + c1);
    assert!((s - hand).abs() < 1e-12);
}

#[test]
fn ssim_matches_two_pass_reference() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = |rng: &mut ChaCha8Rng| (0..10 * 11 * 2).map(|_| rng.random::<f64>() * 255.0).collect();
        let x = Image::new(10, 11, 2, data(&mut rng)).unwrap();
        let y = Image::new(10, 11, 2, data(&mut rng)).unwrap();
        let s = ssim(&ImagePair::new(&x, &y, 255.0).unwrap(), 8, SSIM_K1, SSIM_K2).unwrap();
        assert!((s - reference_ssim(&x, &y, 8, 255.0)).abs() < 1e-9);
    }
}

#[test]
fn ssim_errors() {
    let x = Image::from_fn(4, 4, |_, _| 0.0);
    let p = ImagePair::new(&x, &x, 1.0).unwrap();
    assert!(matches!(ssim_default(&p), Err(Error::Domain(_))));
    let y = Image::from_fn(4, 5, |_, _| 0.0);
    assert!(matches!(ImagePair::new(&x, &y, 1.0), Err(Error::Domain(_))));
    assert!(matches!(ImagePair::new(&x, &x, 0.0), Err(Error::Domain(_))));
}

#[test]
fn perceptual_examples() {
    let a = vec![LayerFeatures::new(1, 2, vec![3.0, 4.0]).unwrap()];
    let z = vec![LayerFeatures::new(1, 2, vec![0.0, 0.0]).unwrap()];
    assert_eq!(layered_perceptual(&a, &z, &[vec![1.0, 1.0]]).unwrap(), 25.0);
    assert_eq!(layered_perceptual(&a, &a, &[vec![1.0, 1.0]]).unwrap(), 0.0);
    assert_eq!(layered_perceptual(&a, &z, &[vec![3.0, 3.0]]).unwrap(), 225.0);
    let wide = vec![LayerFeatures::new(1, 3, vec![0.0; 3]).unwrap()];
    assert!(matches!(layered_perceptual(&a, &wide, &[vec![1.0, 1.0]]), Err(Error::Domain(_))));
    assert!(matches!(layered_perceptual(&a, &z, &[]), Err(Error::Domain(_))));
}

#[test]
fn perceptual_averages_sites_and_sums_layers() {
    let x = vec![LayerFeatures::new(2, 1, vec![1.0, 3.0]).unwrap(), LayerFeatures::new(1, 1, vec![2.0]).unwrap()];
    let y = vec![LayerFeatures::new(2, 1, vec![0.0, 0.0]).unwrap(), LayerFeatures::new(1, 1, vec![0.0]).unwrap()];
    // (1 + 9) / 2 + 0.25 * 4
    assert_eq!(layered_perceptual(&x, &y, &[vec![1.0], vec![0.5]]).unwrap(), 6.0);
}

#[test]
fn cosine_examples() {
    assert!((cosine_alignment(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_alignment(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert!((cosine_alignment(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(cosine_alignment(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let a = 0.5f64.sqrt();
    let b = 2.0f64.sqrt();
    let real = FeatureMatrix::new(2, 1, vec![-a, a], "real").unwrap();
    let gen = FeatureMatrix::new(2, 1, vec![1.0 - b, 1.0 + b], "gen").unwrap();
    assert!((frechet(&real, &gen).unwrap() - 2.0).abs() < 1e-9);
}

fn random_features(seed: u64, n: usize, d: usize, shift: f64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|i| rng.random::<f64>() * (1.0 + (i % d) as f64) + shift).collect();
    FeatureMatrix::new(n, d, data, "rand").unwrap()
}

#[test]
fn frechet_self_is_zero() {
    let f = random_features(4, 40, 5, 0.0);
    assert!(frechet(&f, &f).unwrap() < 1e-9);
}

#[test]
fn frechet_diagonal_data_matches_closed_form() {
    // Independent columns give diagonal covariances up to sampling; use data
    // whose columns are exactly uncorrelated: ±s patterns on disjoint rows.
    let (sr, sg): ([f64; 2], [f64; 2]) = ([1.0, 2.0], [3.0, 0.5]);
    let (mr, mg): ([f64; 2], [f64; 2]) = ([0.0, 1.0], [2.0, -1.0]);
    let build = |s: [f64; 2], m: [f64; 2]| {
        let rows = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let scale = (3.0f64 / 4.0).sqrt();
        let data = rows.iter().flat_map(|r| [m[0] + r[0] * s[0] * scale, m[1] + r[1] * s[1] * scale]).collect();
        FeatureMatrix::new(4, 2, data, "diag").unwrap()
    };
    let expected: f64 = (0..2).map(|k| (mr[k] - mg[k]).powi(2) + (sr[k] - sg[k]).powi(2)).sum();
    assert!((frechet(&build(sr, mr), &build(sg, mg)).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn frechet_rotation_invariant() {
    let (r, g) = (random_features(5, 30, 3, 0.0), random_features(6, 30, 3, 0.4));
    let (c, s) = (0.6f64, 0.8f64);
    let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let turn = |f: &FeatureMatrix| {
        let data = (0..f.rows).flat_map(|i| {
            let row = f.row(i).to_vec();
            (0..3).map(move |a| (0..3).map(|b| rot[a][b] * row[b]).sum::<f64>())
        });
        FeatureMatrix::new(f.rows, 3, data.collect(), "rot").unwrap()
    };
    let d0 = frechet(&r, &g).unwrap();
    assert!((d0 - frechet(&turn(&r), &turn(&g)).unwrap()).abs() < 1e-9);
}

#[test]
fn feature_matrix_validation_and_roundtrip() {
    assert!(FeatureMatrix::new(0, 2, vec![], "x").is_err());
    assert!(FeatureMatrix::new(1, 2, vec![1.0, f64::NAN], "x").is_err());
    let f = random_features(7, 5, 3, 0.0);
    let mut buf = Vec::new();
    f.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], FEATURE_MAGIC);
    let back = FeatureMatrix::read_from(&mut buf.as_slice(), "rand").unwrap();
    assert_eq!(back, f);
    buf[0] = b'X';
    assert!(matches!(FeatureMatrix::read_from(&mut buf.as_slice(), "x"), Err(Error::Format(_))));
}

#[test]
fn report_json_roundtrip() {
    let mut r = MetricReport::default();
    r.insert("ssim", 0.5);
    r.insert("cd", 0.25);
    let s = r.to_json().unwrap();
    assert!(s.find("cd").unwrap() < s.find("ssim").unwrap());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    r.save(&p).unwrap();
    assert_eq!(MetricReport::load(&p).unwrap(), r);
}

proptest! {
    #[test]
    fn chamfer_symmetric_and_duplicates_harmless(seed in 0u64..1000, n in 1usize..20, m in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (cloud(&mut rng, n), cloud(&mut rng, m));
        let ab = chamfer(&a, &b).unwrap();
        prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let mut b2 = b.clone();
        b2.0.push(b.points()[0]);
        prop_assert!(directed(a.points(), b2.points()) <= directed(a.points(), b.points()));
    }

    #[test]
    fn ssim_bounded_and_reflexive(seed in 0u64..1000, h in 8usize..12, w in 8usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Image::new(h, w, 1, (0..h * w).map(|_| rng.random()).collect()).unwrap();
        let y = Image::new(h, w, 1, (0..h * w).map(|_| rng.random()).collect()).unwrap();
        let s = ssim_default(&ImagePair::new(&x, &y, 1.0).unwrap()).unwrap();
        prop_assert!(s.abs() <= 1.0 + 1e-12);
        prop_assert_eq!(ssim_default(&ImagePair::new(&x, &x, 1.0).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn frechet_nonnegative(seed in 0u64..1000) {
        let d = frechet(&random_features(seed, 12, 3, 0.0), &random_features(seed + 1, 9, 3, 0.2)).unwrap();
        prop_assert!(d >= 0.0 && d.is_finite());
    }

    #[test]
    fn perceptual_zero_iff_weighted_diff_zero(a in prop::collection::vec(-5.0f64..5.0, 4), w in prop::collection::vec(0.0f64..2.0, 2)) {
        let x = vec![LayerFeatures::new(2, 2, a.clone()).unwrap()];
        let z = vec![LayerFeatures::new(2, 2, vec![0.0; 4]).unwrap()];
        let d = layered_perceptual(&x, &z, std::slice::from_ref(&w)).unwrap();
        let any = a.iter().enumerate().any(|(i, v)| w[i % 2] * v != 0.0);
        prop_assert_eq!(d > 0.0, any);
    }
}
