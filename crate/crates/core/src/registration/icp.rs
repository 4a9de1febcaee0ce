use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{Point, PointCloud};

use super::kdtree::NnIndex;
use super::rigid::{kabsch_fit, translation_fit, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop once an iteration lowers the RMSE by less than this.
    pub converge_tol: f64,
    /// Pairs farther apart are dropped and cost this distance; `None` keeps all.
    pub max_correspondence: Option<f64>,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self { max_iters: 64, converge_tol: 1e-9, max_correspondence: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Final value of the (truncated) RMSE objective.
    pub rmse: f64,
    /// RMSE over the pairs within `max_correspondence`.
    pub inlier_rmse: f64,
    pub inliers: usize,
    /// Accepted updates.
    pub iterations: usize,
    /// Objective after each accepted update, starting with `init`.
    pub history: Vec<f64>,
}

struct Eval {
    rmse: f64,
    inlier_rmse: f64,
    src: Vec<Point>,
    dst: Vec<Point>,
}

fn evaluate(src: &[Point], index: &NnIndex, t: &RigidTransform, cap2: f64) -> Eval {
    let (mut total, mut inl) = (0.0, 0.0);
    let (mut s, mut d) = (Vec::new(), Vec::new());
    for p in src {
        let (j, e) = index.nearest(&t.apply(p)).expect("non-empty index");
        if e < cap2 {
            total += e;
            inl += e;
            s.push(*p);
            d.push(index.points()[j]);
        } else {
            total += cap2;
        }
    }
    let inlier_rmse = if s.is_empty() { f64::INFINITY } else { (inl / s.len() as f64).sqrt() };
    Eval { rmse: (total / src.len() as f64).sqrt(), inlier_rmse, src: s, dst: d }
}

/// Point-to-point ICP with exact nearest neighbours. An update is kept only
/// when it lowers the objective by more than `converge_tol`, so the history is
/// strictly decreasing and an exact `init` comes back unchanged.
pub fn icp_refine(src: &PointCloud, dst: &PointCloud, init: &RigidTransform, opts: &IcpOptions) -> Result<IcpResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::Empty("ICP needs non-empty clouds".into()));
    }
    let index = NnIndex::new(dst.points());
    let cap2 = opts.max_correspondence.map_or(f64::INFINITY, |c| c * c);
    let mut t = *init;
    let mut cur = evaluate(src.points(), &index, &t, cap2);
    let mut history = vec![cur.rmse];
    for _ in 0..opts.max_iters {
        let next = match kabsch_fit(&cur.src, &cur.dst) {
            Ok(fit) => fit,
            Err(_) if !cur.src.is_empty() => translation_fit(&cur.src, &cur.dst, &t.rotation),
            Err(_) => break,
        };
        let e = evaluate(src.points(), &index, &next, cap2);
        if !(e.rmse < cur.rmse - opts.converge_tol) {
            break;
        }
        t = next;
        cur = e;
        history.push(cur.rmse);
    }
    Ok(IcpResult { transform: t, rmse: cur.rmse, inlier_rmse: cur.inlier_rmse, inliers: cur.src.len(), iterations: history.len() - 1, history })
}
