use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::params::{read_f64, read_u32};
use crate::voxel::io::{expect_header, read_f64s, write_f64s, write_header};
use crate::voxel::{DenseGrid, PointCloud, OCCUPANCY_THRESHOLD};

use super::icp::{icp_refine, IcpOptions};
use super::kdtree::NnIndex;
use super::ransac::{ransac_rigid, RansacOptions};
use super::rigid::RigidTransform;

pub const MASK_MAGIC: &[u8; 4] = b"BVEM";

/// Voxels judged spatially consistent between an asset and its edit.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationMask {
    resolution: usize,
    bits: Vec<bool>,
    /// Inlier threshold, world units.
    pub tau: f64,
    pub transform: RigidTransform,
}

/// Whether a mask was computed against a usable edited cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStatus {
    Complete,
    EmptyEditCloud,
}

impl PreservationMask {
    pub fn new(resolution: usize, bits: Vec<bool>, tau: f64, transform: RigidTransform) -> Result<Self> {
        if bits.len() != resolution.pow(3) {
            return Err(shape_err!("{} mask bits for {resolution}³", bits.len()));
        }
        Ok(Self { resolution, bits, tau, transform })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[(x * self.resolution + y) * self.resolution + z]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bits as 0/1 reals in lattice order.
    pub fn to_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(u8::from(b))).collect()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(shape_err!("IoU of {}³ and {}³ masks", self.resolution, other.resolution));
        }
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a && b);
            uni += usize::from(a || b);
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, MASK_MAGIC)?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        write_f64s(w, &[self.tau])?;
        write_f64s(w, &self.transform.to_array())?;
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            packed[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&packed)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_header(r, MASK_MAGIC)?;
        let res = read_u32(r)? as usize;
        let tau = read_f64(r)?;
        let arr: [f64; 12] = read_f64s(r, 12)?.try_into().expect("12 values");
        let transform = RigidTransform::from_array(&arr)?;
        let n = res.checked_pow(3).ok_or_else(|| Error::Format("mask too large".into()))?;
        let mut packed = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::new(res, bits, tau, transform)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Marks each voxel occupied in `orig` whose transformed center lies strictly
/// within `tau` of the edited cloud. Unoccupied voxels stay 0. When `orig` is
/// finer than `out_resolution` the result is reduced with [`mask_downsample`].
pub fn preservation_mask(
    orig: &DenseGrid,
    edit_cloud: &PointCloud,
    transform: &RigidTransform,
    tau: f64,
    out_resolution: usize,
) -> Result<(PreservationMask, MaskStatus)> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau {tau} must be positive")));
    }
    let r = orig.resolution();
    if out_resolution == 0 || !r.is_multiple_of(out_resolution) {
        return Err(shape_err!("cannot produce a {out_resolution}³ mask from a {r}³ grid"));
    }
    let mut bits = vec![false; orig.voxel_count()];
    let status = if edit_cloud.is_empty() {
        MaskStatus::EmptyEditCloud
    } else {
        let index = NnIndex::new(edit_cloud.points());
        let tau2 = tau * tau;
        for c in orig.occupied(0, OCCUPANCY_THRESHOLD) {
            let p = transform.apply(&orig.center(c));
            let (_, d) = index.nearest(&p).expect("non-empty index");
            bits[orig.index(c[0] as usize, c[1] as usize, c[2] as usize)] = d < tau2;
        }
        MaskStatus::Complete
    };
    let fine = PreservationMask::new(r, bits, tau, *transform)?;
    let mask = if out_resolution == r { fine } else { mask_downsample(&fine, orig, out_resolution)? };
    Ok((mask, status))
}

/// All-children reduction: a coarse bit is set iff it has an occupied child
/// and every occupied child is preserved. `occupancy` is the fine grid the
/// mask was computed on.
pub fn mask_downsample(m: &PreservationMask, occupancy: &DenseGrid, target: usize) -> Result<PreservationMask> {
    let r = m.resolution;
    if occupancy.resolution() != r {
        return Err(shape_err!("{r}³ mask with {}³ occupancy", occupancy.resolution()));
    }
    if target == 0 || !r.is_multiple_of(target) {
        return Err(shape_err!("cannot reduce a {r}³ mask to {target}³"));
    }
    let f = r / target;
    let mut any = vec![false; target.pow(3)];
    let mut all = vec![true; target.pow(3)];
    for i in 0..occupancy.voxel_count() {
        if occupancy.values()[i * occupancy.channels()] > OCCUPANCY_THRESHOLD {
            let c = occupancy.coord_of(i).map(|v| v as usize / f);
            let j = (c[0] * target + c[1]) * target + c[2];
            any[j] = true;
            all[j] &= m.bits[i];
        }
    }
    let bits = any.iter().zip(&all).map(|(&a, &b)| a && b).collect();
    PreservationMask::new(target, bits, m.tau, m.transform)
}

/// Settings for deriving masks from an asset pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// τ in voxels of the finest grid.
    pub tau_voxels: f64,
    /// Grids finer than this are pooled for the RANSAC stage.
    pub registration_resolution: usize,
    pub ransac_iters: usize,
    pub icp_max_iters: usize,
    pub icp_converge_tol: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { tau_voxels: 1.0, registration_resolution: 16, ransac_iters: 512, icp_max_iters: 64, icp_converge_tol: 1e-9, seed: 0 }
    }
}

/// Registration outcome plus masks at each requested resolution.
#[derive(Debug, Clone)]
pub struct MaskReport {
    pub transform: RigidTransform,
    pub ransac_inliers: usize,
    pub icp_inliers: usize,
    pub rmse: f64,
    pub tau: f64,
    pub status: MaskStatus,
    pub masks: Vec<PreservationMask>,
}

impl MaskReport {
    /// Preserved share of the occupied voxels of `orig` at the finest mask.
    pub fn preserved_fraction(&self, orig: &DenseGrid) -> f64 {
        let occ = orig.occupied(0, OCCUPANCY_THRESHOLD).len();
        let fine = self.masks.iter().max_by_key(|m| m.resolution()).map_or(0, PreservationMask::count);
        if occ == 0 {
            1.0
        } else {
            fine as f64 / occ as f64
        }
    }
}

/// RANSAC on pooled clouds, ICP on full clouds, then the mask at the grid
/// resolution and all-children reductions to the other `resolutions`.
pub fn build_masks(orig: &DenseGrid, edit: &DenseGrid, resolutions: &[usize], cfg: &MaskConfig) -> Result<MaskReport> {
    let r = orig.resolution();
    if edit.resolution() != r || edit.voxel_size != orig.voxel_size || edit.origin != orig.origin {
        return Err(shape_err!("asset grids differ in geometry"));
    }
    let tau = cfg.tau_voxels * orig.voxel_size;
    let th = OCCUPANCY_THRESHOLD;
    let (src, dst) = (orig.to_points(0, th)?, edit.to_points(0, th)?);
    let (mut transform, mut ransac_inliers, mut icp_inliers, mut rmse) = (RigidTransform::identity(), 0, 0, f64::NAN);
    if src.len() >= 3 && dst.len() >= 3 {
        let coarse = cfg.registration_resolution.min(r);
        let pool = |g: &DenseGrid| -> Result<PointCloud> {
            if coarse < r && r.is_multiple_of(coarse) {
                g.pool_occupancy(coarse, th)?.to_points(0, th)
            } else {
                g.to_points(0, th)
            }
        };
        let (cs, cd) = (pool(orig)?, pool(edit)?);
        let ro = RansacOptions { iters: cfg.ransac_iters, inlier_tol: tau, seed: cfg.seed, ..Default::default() };
        let rs = ransac_rigid(&cs, &cd, &ro)?;
        ransac_inliers = rs.inliers;
        let io = IcpOptions { max_iters: cfg.icp_max_iters, converge_tol: cfg.icp_converge_tol, max_correspondence: Some(tau) };
        let icp = icp_refine(&src, &dst, &rs.transform, &io)?;
        transform = icp.transform;
        icp_inliers = icp.inliers;
        rmse = icp.inlier_rmse;
    }
    let (fine, status) = preservation_mask(orig, &dst, &transform, tau, r)?;
    let mut masks = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        masks.push(if res == r { fine.clone() } else { mask_downsample(&fine, orig, res)? });
    }
    Ok(MaskReport { transform, ransac_inliers, icp_inliers, rmse, tau, status, masks })
}
