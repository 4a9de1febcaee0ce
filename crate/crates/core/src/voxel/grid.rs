use std::collections::HashSet;

use crate::error::{shape_err, Error, Result};

pub type Point = [f64; 3];
pub type Coord = [u16; 3];

/// Channelled values on a cubic lattice, stored `(x, y, z, c)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    resolution: usize,
    channels: usize,
    values: Vec<f64>,
    /// World units per voxel.
    pub voxel_size: f64,
    /// World position of the center of voxel (0, 0, 0).
    pub origin: Point,
}

impl DenseGrid {
    pub fn zeros(resolution: usize, channels: usize, voxel_size: f64, origin: Point) -> Result<Self> {
        if resolution == 0 || channels == 0 {
            return Err(shape_err!("grid needs positive resolution and channels"));
        }
        if resolution > u16::MAX as usize + 1 {
            return Err(shape_err!("resolution {resolution} exceeds the coordinate range"));
        }
        Ok(Self { resolution, channels, values: vec![0.0; resolution.pow(3) * channels], voxel_size, origin })
    }

    /// Grid spanning the unit cube `[0, 1]³`.
    pub fn unit(resolution: usize, channels: usize) -> Result<Self> {
        let vs = 1.0 / resolution.max(1) as f64;
        Self::zeros(resolution, channels, vs, [0.5 * vs; 3])
    }

    pub fn from_values(resolution: usize, channels: usize, values: Vec<f64>, voxel_size: f64, origin: Point) -> Result<Self> {
        let mut g = Self::zeros(resolution, channels, voxel_size, origin)?;
        if values.len() != g.values.len() {
            return Err(shape_err!("grid {resolution}³×{channels} needs {} values, got {}", g.values.len(), values.len()));
        }
        g.values = values;
        Ok(g)
    }

    /// Same geometry, new values.
    pub fn with_values(&self, channels: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.resolution, channels, values, self.voxel_size, self.origin)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.values[self.index(x, y, z) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f64) {
        let i = self.index(x, y, z) * self.channels + c;
        self.values[i] = v;
    }

    /// Lattice coordinate of flat voxel index `i`.
    pub fn coord_of(&self, i: usize) -> Coord {
        let r = self.resolution;
        [(i / (r * r)) as u16, ((i / r) % r) as u16, (i % r) as u16]
    }

    pub fn center(&self, c: Coord) -> Point {
        [0, 1, 2].map(|a| self.origin[a] + c[a] as f64 * self.voxel_size)
    }

    /// Voxels whose `channel` value exceeds `threshold`, in lattice order.
    pub fn occupied(&self, channel: usize, threshold: f64) -> Vec<Coord> {
        (0..self.voxel_count()).filter(|&i| self.values[i * self.channels + channel] > threshold).map(|i| self.coord_of(i)).collect()
    }

    /// Single-channel occupancy at `target` resolution: a coarse voxel is 1
    /// when any child exceeds `threshold` on channel 0. Geometry is kept so
    /// coarse centers sit at the middle of their children.
    pub fn pool_occupancy(&self, target: usize, threshold: f64) -> Result<DenseGrid> {
        let r = self.resolution;
        if target == 0 || !r.is_multiple_of(target) {
            return Err(shape_err!("cannot pool {r}³ to {target}³"));
        }
        let f = r / target;
        let vs = self.voxel_size * f as f64;
        let origin = self.origin.map(|o| o + 0.5 * (f as f64 - 1.0) * self.voxel_size);
        let mut out = DenseGrid::zeros(target, 1, vs, origin)?;
        for i in 0..self.voxel_count() {
            if self.values[i * self.channels] > threshold {
                let c = self.coord_of(i).map(|v| v as usize / f);
                out.set(c[0], c[1], c[2], 0, 1.0);
            }
        }
        Ok(out)
    }

    /// World-space centers of voxels above `threshold` on `channel`.
    pub fn to_points(&self, channel: usize, threshold: f64) -> Result<PointCloud> {
        if channel >= self.channels {
            return Err(shape_err!("channel {channel} of {}", self.channels));
        }
        Ok(PointCloud(self.occupied(channel, threshold).into_iter().map(|c| self.center(c)).collect()))
    }
}

/// Occupied coordinates with one feature row each, sorted and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    resolution: usize,
    channels: usize,
    coords: Vec<Coord>,
    feats: Vec<f64>,
}

impl SparseVoxelTensor {
    /// Validates coordinates (strictly increasing, in range) and row count.
    pub fn new(resolution: usize, channels: usize, coords: Vec<Coord>, feats: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(shape_err!("sparse tensor needs at least one channel"));
        }
        if feats.len() != coords.len() * channels {
            return Err(shape_err!("{} coords with {} feature values at {channels} channels", coords.len(), feats.len()));
        }
        if let Some(c) = coords.iter().find(|c| c.iter().any(|&v| v as usize >= resolution)) {
            return Err(shape_err!("coordinate {c:?} outside {resolution}³"));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(shape_err!("coordinates must be unique and sorted"));
        }
        Ok(Self { resolution, channels, coords, feats })
    }

    /// Sorts rows by coordinate; duplicate coordinates are an error.
    pub fn from_unsorted(resolution: usize, channels: usize, rows: Vec<(Coord, Vec<f64>)>) -> Result<Self> {
        let mut rows = rows;
        rows.sort_by_key(|a| a.0);
        let mut coords = Vec::with_capacity(rows.len());
        let mut feats = Vec::with_capacity(rows.len() * channels);
        for (c, f) in rows {
            if f.len() != channels {
                return Err(shape_err!("feature row of {} for {channels} channels", f.len()));
            }
            if coords.last() == Some(&c) {
                return Err(shape_err!("duplicate coordinate {c:?}"));
            }
            coords.push(c);
            feats.extend(f);
        }
        Self::new(resolution, channels, coords, feats)
    }

    pub fn empty(resolution: usize, channels: usize) -> Self {
        Self { resolution, channels, coords: Vec::new(), feats: Vec::new() }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    /// Same coordinates, replacement features.
    pub fn with_feats(&self, channels: usize, feats: Vec<f64>) -> Result<Self> {
        Self::new(self.resolution, channels, self.coords.clone(), feats)
    }

    pub fn find(&self, c: &Coord) -> Option<usize> {
        self.coords.binary_search(c).ok()
    }
}

/// Coordinates occupied at `fine_res` by the children of every voxel set in a
/// coarse occupancy grid (channel 0 above `threshold`).
pub fn upsample_coords(grid: &DenseGrid, fine_res: usize, threshold: f64) -> Result<Vec<Coord>> {
    let r = grid.resolution();
    if !fine_res.is_multiple_of(r) || fine_res < r {
        return Err(shape_err!("cannot refine {r}³ to {fine_res}³"));
    }
    let f = fine_res / r;
    let mut out = Vec::new();
    let occ: HashSet<Coord> = grid.occupied(0, threshold).into_iter().collect();
    for x in 0..fine_res {
        for y in 0..fine_res {
            for z in 0..fine_res {
                let parent = [(x / f) as u16, (y / f) as u16, (z / f) as u16];
                if occ.contains(&parent) {
                    out.push([x as u16, y as u16, z as u16]);
                }
            }
        }
    }
    Ok(out)
}

/// Unordered set of 3-D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud(pub Vec<Point>);

impl PointCloud {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    /// ASCII "x y z" per line.
    pub fn to_xyz(&self) -> String {
        let mut s = String::with_capacity(self.0.len() * 32);
        for p in &self.0 {
            s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        s
    }

    pub fn from_xyz(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> =
                line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 values, got {}", n + 1, vals.len())));
            }
            pts.push([vals[0], vals[1], vals[2]]);
        }
        Ok(Self(pts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_from_grid() {
        let mut g = DenseGrid::zeros(4, 1, 1.0, [0.0; 3]).unwrap();
        assert!(g.to_points(0, 0.5).unwrap().is_empty());
        g.set(0, 0, 0, 0, 1.0);
        assert_eq!(g.to_points(0, 0.5).unwrap().0, vec![[0.0, 0.0, 0.0]]);
        g.set(1, 0, 0, 0, 1.0);
        let pts = g.to_points(0, 0.5).unwrap().0;
        let d: f64 = (0..3).map(|a| (pts[0][a] - pts[1][a]).powi(2)).sum::<f64>().sqrt();
        assert_eq!(d, 1.0);
        assert!(g.to_points(1, 0.5).is_err());
    }

    #[test]
    fn sparse_validation() {
        assert!(SparseVoxelTensor::new(4, 1, vec![[0, 0, 1], [0, 0, 0]], vec![0.0, 0.0]).is_err());
        assert!(SparseVoxelTensor::new(4, 1, vec![[0, 0, 4]], vec![0.0]).is_err());
        assert!(SparseVoxelTensor::new(4, 2, vec![[0, 0, 1]], vec![0.0]).is_err());
        let s = SparseVoxelTensor::from_unsorted(4, 1, vec![([1, 0, 0], vec![2.0]), ([0, 3, 0], vec![1.0])]).unwrap();
        assert_eq!(s.coords(), &[[0, 3, 0], [1, 0, 0]]);
        assert_eq!(s.feats(), &[1.0, 2.0]);
        assert!(SparseVoxelTensor::from_unsorted(4, 1, vec![([1, 0, 0], vec![2.0]), ([1, 0, 0], vec![1.0])]).is_err());
    }

    #[test]
    fn xyz_round_trip() {
        let pc = PointCloud(vec![[0.5, -1.0, 2.25], [1e-3, 0.0, 3.0]]);
        assert_eq!(PointCloud::from_xyz(&pc.to_xyz()).unwrap(), pc);
        assert!(PointCloud::from_xyz("1 2\n").is_err());
    }

    #[test]
    fn pooling_is_a_union() {
        let mut g = DenseGrid::unit(4, 2).unwrap();
        g.set(3, 2, 0, 0, 1.0);
        g.set(0, 0, 0, 1, 1.0);
        let p = g.pool_occupancy(2, 0.5).unwrap();
        assert_eq!(p.occupied(0, 0.5), vec![[1, 1, 0]]);
        assert_eq!((p.voxel_size, p.origin), (0.5, [0.25; 3]));
        assert!(g.pool_occupancy(3, 0.5).is_err());
    }

    #[test]
    fn children_of_occupied_voxels() {
        let mut g = DenseGrid::unit(2, 1).unwrap();
        g.set(1, 0, 1, 0, 1.0);
        let c = upsample_coords(&g, 4, 0.5).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|p| p[0] >= 2 && p[1] < 2 && p[2] >= 2));
    }
}
