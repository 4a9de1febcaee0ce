use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::registration::NnIndex;
use crate::voxel::{Point, PointCloud};

/// Points drawn for chamfer evaluation.
pub const CHAMFER_POINTS: usize = 20_480;

fn directed(from: &[Point], to: &NnIndex) -> f64 {
    let sum: f64 = from.iter().map(|p| to.nearest(p).map_or(0.0, |(_, d)| d)).sum();
    sum / from.len() as f64
}

/// Symmetric chamfer distance: the mean squared nearest-neighbour distance
/// from each cloud to the other, summed.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("chamfer distance of an empty cloud".into()));
    }
    let (ia, ib) = (NnIndex::new(a.points()), NnIndex::new(b.points()));
    Ok(directed(a.points(), &ib) + directed(b.points(), &ia))
}

/// At most `n` points chosen uniformly without repetition, in their original
/// order; all points when the cloud is no larger than `n`.
pub fn subsample(pc: &PointCloud, n: usize, rng: &mut impl Rng) -> PointCloud {
    if pc.len() <= n {
        return pc.clone();
    }
    let mut idx = sample(rng, pc.len(), n).into_vec();
    idx.sort_unstable();
    PointCloud(idx.into_iter().map(|i| pc.points()[i]).collect())
}
