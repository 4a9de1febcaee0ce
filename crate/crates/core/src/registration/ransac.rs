use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng;
use crate::voxel::{Point, PointCloud};

use super::kdtree::{dist2, NnIndex};
use super::rigid::{kabsch_fit, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacOptions {
    /// Upper bound on sampled triples.
    pub iters: usize,
    /// Inlier distance, world units.
    pub inlier_tol: f64,
    pub seed: u64,
    /// Early exit once a better hypothesis is this unlikely to exist.
    pub confidence: f64,
    /// Per-sample cap on target triples examined.
    pub max_candidates: usize,
    /// Per-sample cap on fully scored hypotheses.
    pub max_scored: usize,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self { iters: 512, inlier_tol: 1.0 / 64.0, seed: 0, confidence: 0.999, max_candidates: 20_000, max_scored: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    pub inliers: usize,
    /// Triples actually sampled.
    pub iterations: usize,
}

/// Target points indexed once for repeated hypothesis scoring.
struct Scorer<'a> {
    src: &'a [Point],
    index: NnIndex,
    tol2: f64,
}

impl Scorer<'_> {
    fn is_inlier(&self, t: &RigidTransform, p: &Point) -> bool {
        self.index.nearest(&t.apply(p)).is_some_and(|(_, d)| d < self.tol2)
    }

    fn count(&self, t: &RigidTransform) -> usize {
        self.src.iter().filter(|p| self.is_inlier(t, p)).count()
    }

    /// Inlier count and summed squared residual, plus the pairs themselves.
    fn pairs(&self, t: &RigidTransform) -> (Vec<Point>, Vec<Point>, f64) {
        let (mut s, mut d, mut sse) = (Vec::new(), Vec::new(), 0.0);
        for p in self.src {
            if let Some((j, e)) = self.index.nearest(&t.apply(p)) {
                if e < self.tol2 {
                    s.push(*p);
                    d.push(self.index.points()[j]);
                    sse += e;
                }
            }
        }
        (s, d, sse)
    }
}

/// Orthonormal frame of a triangle, `None` when it is too thin.
fn frame(a: &Point, b: &Point, c: &Point) -> Option<Matrix3<f64>> {
    let (a, b, c) = (Vector3::from(*a), Vector3::from(*b), Vector3::from(*c));
    let e1 = (b - a).try_normalize(1e-12)?;
    let w = c - a;
    let e2 = (w - e1 * w.dot(&e1)).try_normalize(1e-9 * w.norm().max(1e-12))?;
    Some(Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]))
}

fn triangle_transform(s: [&Point; 3], d: [&Point; 3]) -> Option<RigidTransform> {
    let rotation = frame(d[0], d[1], d[2])? * frame(s[0], s[1], s[2])?.transpose();
    let cs = (Vector3::from(*s[0]) + Vector3::from(*s[1]) + Vector3::from(*s[2])) / 3.0;
    let cd = (Vector3::from(*d[0]) + Vector3::from(*d[1]) + Vector3::from(*d[2])) / 3.0;
    Some(RigidTransform { rotation, translation: cd - rotation * cs })
}

/// Samples needed to draw an all-inlier triple with the given confidence.
fn needed_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let w3 = inlier_ratio.clamp(0.0, 1.0).powi(3);
    if w3 >= 1.0 {
        0
    } else if w3 <= 0.0 {
        usize::MAX
    } else {
        ((1.0 - confidence).ln() / (1.0 - w3).ln()).ceil().max(0.0) as usize
    }
}

/// Rigid RANSAC without given correspondences. Each iteration draws a source
/// triple uniformly; target triples with matching side lengths (within
/// `inlier_tol`) yield hypotheses, which are screened on three probe points
/// and scored by nearest-neighbour inliers. The identity is hypothesis zero
/// and ties keep the earliest hypothesis. The winner is refit on its inliers.
pub fn ransac_rigid(src: &PointCloud, dst: &PointCloud, opts: &RansacOptions) -> Result<RansacResult> {
    let (sp, dp) = (src.points(), dst.points());
    if sp.len() < 3 || dp.len() < 3 {
        return Err(Error::Domain(format!("RANSAC needs 3 points per cloud, got {} and {}", sp.len(), dp.len())));
    }
    if !(opts.inlier_tol > 0.0) {
        return Err(Error::Domain(format!("inlier tolerance {} must be positive", opts.inlier_tol)));
    }
    let tol = opts.inlier_tol;
    let scorer = Scorer { src: sp, index: NnIndex::new(dp), tol2: tol * tol };
    let mut g = rng(opts.seed);

    // per target point, every other target point sorted by distance
    let n = dp.len();
    let table: Vec<Vec<(f64, u32)>> = (0..n)
        .map(|i| {
            let mut row: Vec<(f64, u32)> = (0..n).filter(|&j| j != i).map(|j| (dist2(&dp[i], &dp[j]).sqrt(), j as u32)).collect();
            row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            row
        })
        .collect();
    let band = |i: usize, d: f64| -> &[(f64, u32)] {
        let row = &table[i];
        let lo = row.partition_point(|e| e.0 < d - tol);
        let hi = row.partition_point(|e| e.0 <= d + tol);
        &row[lo..hi]
    };

    let mut best_t = RigidTransform::identity();
    let mut best_n = scorer.count(&best_t);
    let mut iterations = 0;
    while iterations < opts.iters && iterations < needed_iterations(best_n as f64 / sp.len() as f64, opts.confidence) {
        iterations += 1;
        let tri = sample(&mut g, sp.len(), 3);
        let (a, b, c) = (&sp[tri.index(0)], &sp[tri.index(1)], &sp[tri.index(2)]);
        let probes: Vec<&Point> = (0..3).map(|_| &sp[g.random_range(0..sp.len())]).collect();
        if frame(a, b, c).is_none() {
            continue;
        }
        let (dab, dac, dbc) = (dist2(a, b).sqrt(), dist2(a, c).sqrt(), dist2(b, c).sqrt());
        let start = g.random_range(0..n);
        let (mut examined, mut scored) = (0, 0);
        'anchors: for k in 0..n {
            let ia = (start + k) % n;
            for &(_, ib) in band(ia, dab) {
                for &(_, ic) in band(ia, dac) {
                    if ib == ic || (dist2(&dp[ib as usize], &dp[ic as usize]).sqrt() - dbc).abs() > tol {
                        continue;
                    }
                    examined += 1;
                    if examined > opts.max_candidates {
                        break 'anchors;
                    }
                    let Some(t) = triangle_transform([a, b, c], [&dp[ia], &dp[ib as usize], &dp[ic as usize]]) else {
                        continue;
                    };
                    if probes.iter().filter(|p| scorer.is_inlier(&t, p)).count() < 2 {
                        continue;
                    }
                    let cnt = scorer.count(&t);
                    if cnt > best_n {
                        best_n = cnt;
                        best_t = t;
                    }
                    scored += 1;
                    if scored >= opts.max_scored {
                        break 'anchors;
                    }
                }
            }
        }
    }
    if best_n < 3 {
        return Err(Error::Registration(format!("best hypothesis has {best_n} inliers")));
    }
    // refit on inliers; accepted only when it keeps the inliers and lowers
    // their residual, so an exact hypothesis is returned untouched
    let (s, d, sse) = scorer.pairs(&best_t);
    if let Ok(refit) = kabsch_fit(&s, &d) {
        let (s2, _, sse2) = scorer.pairs(&refit);
        if s2.len() > best_n || (s2.len() == best_n && sse2 < sse - 1e-12 * best_n as f64 * tol * tol) {
            best_t = refit;
            best_n = s2.len();
        }
    }
    Ok(RansacResult { transform: best_t, inliers: best_n, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut g = rng(seed);
        (0..n).map(|_| [g.random(), g.random(), g.random()]).collect()
    }

    #[test]
    fn identity_on_equal_clouds() {
        let pc = PointCloud(cloud(200, 1));
        for seed in 0..3 {
            let r = ransac_rigid(&pc, &pc, &RansacOptions { seed, ..Default::default() }).unwrap();
            assert_eq!(r.transform, RigidTransform::identity());
            assert_eq!(r.inliers, 200);
        }
    }

    #[test]
    fn recovers_transform_with_outliers() {
        let src = cloud(400, 2);
        let truth = RigidTransform::from_axis_angle([0.3, -1.0, 0.5], 0.4, [0.15, -0.05, 0.1]);
        let mut dst: Vec<Point> = src.iter().map(|p| truth.apply(p)).collect();
        dst.extend(cloud(20, 3));
        let r = ransac_rigid(&PointCloud(src), &PointCloud(dst), &RansacOptions::default()).unwrap();
        let (ang, tr) = r.transform.distance(&truth);
        assert!(ang < 1e-3 && tr < 1e-3, "{ang} {tr}");
        assert!(r.inliers >= 400);
    }

    #[test]
    fn reproducible_and_precondition() {
        let src = PointCloud(cloud(100, 4));
        let t = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.3, [0.1, 0.0, 0.0]);
        let dst = PointCloud(src.points().iter().map(|p| t.apply(p)).collect());
        let o = RansacOptions { seed: 9, ..Default::default() };
        assert_eq!(ransac_rigid(&src, &dst, &o).unwrap(), ransac_rigid(&src, &dst, &o).unwrap());
        let two = PointCloud(cloud(2, 5));
        assert!(matches!(ransac_rigid(&two, &dst, &o), Err(Error::Domain(_))));
    }

    #[test]
    fn iteration_budget() {
        assert_eq!(needed_iterations(1.0, 0.999), 0);
        assert_eq!(needed_iterations(0.5, 0.999), 52);
    }
}
