use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::voxel::Point;

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally), then `t`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Self {
        let ax = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let rotation = *nalgebra::Rotation3::from_axis_angle(&ax, angle).matrix();
        Self { rotation, translation: Vector3::from(t) }
    }

    #[inline]
    pub fn apply(&self, p: &Point) -> Point {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2] + t[0],
            r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2] + t[1],
            r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Rotation angle of `self⁻¹ ∘ other` and translation gap.
    pub fn distance(&self, other: &Self) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.angle(), (self.translation - other.translation).norm())
    }

    /// `max |RᵀR − I|` and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Row-major rotation then translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut a = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] = self.rotation[(i, j)];
            }
            a[9 + i] = self.translation[i];
        }
        a
    }

    /// Inverse of [`to_array`](Self::to_array); rejects non-rotations.
    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        let t = Self { rotation: Matrix3::from_row_slice(&a[..9]), translation: Vector3::new(a[9], a[10], a[11]) };
        if !(t.orthonormality_error() < 1e-9) {
            return Err(Error::Format("rotation is not orthonormal with det +1".into()));
        }
        Ok(t)
    }
}

pub(crate) fn centroid(pts: &[Point]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::from(*p);
    }
    c / pts.len() as f64
}

/// Least-squares rigid fit `dst ≈ R·src + t` over paired points, with the
/// reflection case corrected to det +1.
pub fn kabsch_fit(src: &[Point], dst: &[Point]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(crate::error::shape_err!("{} source vs {} target points", src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences, need 3", src.len())));
    }
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (Vector3::from(*s) - cs, Vector3::from(*d) - cd);
        h += a * b.transpose();
        scatter += a * a.transpose();
    }
    // collinear sources leave the second scatter eigenvalue at zero
    let sv = scatter.symmetric_eigenvalues();
    let mut ev = [sv[0], sv[1], sv[2]];
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-12 * ev[2]) {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform { rotation, translation: cd - rotation * cs })
}

/// Translation-only fit, used when fewer than three usable pairs exist.
pub(crate) fn translation_fit(src: &[Point], dst: &[Point], rotation: &Matrix3<f64>) -> RigidTransform {
    let (cs, cd) = (centroid(src), centroid(dst));
    RigidTransform { rotation: *rotation, translation: cd - rotation * cs }
}
