use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::numcore::params::read_u32;
use crate::voxel::io::{expect_header, read_f64s, write_f64s, write_header};

pub const FEATURE_MAGIC: &[u8; 4] = b"BVEF";

/// `rows × cols` finite feature vectors with a free-text provenance label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub label: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(shape_err!("{} values for a {rows}×{cols} feature matrix", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(Self { rows, cols, data, label: label.into() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, FEATURE_MAGIC)?;
        for v in [self.rows, self.cols] {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("size {v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        write_f64s(w, &self.data)
    }

    /// The label is not stored; it is set to `label`.
    pub fn read_from(r: &mut impl Read, label: &str) -> Result<Self> {
        expect_header(r, FEATURE_MAGIC)?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let data = read_f64s(r, rows * cols)?;
        Self::new(rows, cols, data, label).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a matrix labelled with its file name.
    pub fn load(path: &Path) -> Result<Self> {
        let label = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_from(&mut BufReader::new(File::open(path)?), &label)
    }

    /// Column means and unbiased covariance (`N − 1` normalization; a single
    /// row has zero covariance).
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.rows, self.cols);
        let m = DMatrix::from_row_slice(n, d, &self.data);
        let mean = DVector::from_iterator(d, (0..d).map(|j| m.column(j).sum() / n as f64));
        let mut centred = m;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let cov = centred.transpose() * &centred / denom;
        (mean, cov)
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_alignment(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-layer features: `sites × channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub sites: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LayerFeatures {
    pub fn new(sites: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if sites == 0 || data.len() != sites * channels {
            return Err(Error::Domain(format!("{} values for {sites} sites × {channels} channels", data.len())));
        }
        Ok(Self { sites, channels, data })
    }
}

/// `Σ_l mean_sites ‖w_l ⊙ (φˡ(x) − φˡ(y))‖²` with channel weights `w_l`.
pub fn layered_perceptual(fx: &[LayerFeatures], fy: &[LayerFeatures], weights: &[Vec<f64>]) -> Result<f64> {
    if fx.len() != fy.len() || fx.len() != weights.len() {
        return Err(Error::Domain(format!("{} and {} layers with {} weight vectors", fx.len(), fy.len(), weights.len())));
    }
    let mut total = 0.0;
    for (l, ((a, b), w)) in fx.iter().zip(fy).zip(weights).enumerate() {
        if (a.sites, a.channels) != (b.sites, b.channels) || w.len() != a.channels {
            return Err(Error::Domain(format!("layer {l}: {}×{} vs {}×{} with {} weights", a.sites, a.channels, b.sites, b.channels, w.len())));
        }
        let mut layer = 0.0;
        for (ra, rb) in a.data.chunks(a.channels.max(1)).zip(b.data.chunks(b.channels.max(1))) {
            layer += ra.iter().zip(rb).zip(w).map(|((p, q), w)| (w * (p - q)).powi(2)).sum::<f64>();
        }
        total += layer / a.sites as f64;
    }
    Ok(total)
}

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, EIGEN_EPS, EIGEN_MAX_ITER).ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym_eigen(sym)?;
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits:
/// `‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r^½ Σ_g Σ_r^½)^½)`, clamped at zero.
pub fn frechet(real: &FeatureMatrix, gen: &FeatureMatrix) -> Result<f64> {
    if real.cols != gen.cols {
        return Err(Error::Domain(format!("feature widths {} and {}", real.cols, gen.cols)));
    }
    let (mr, sr) = real.moments();
    let (mg, sg) = gen.moments();
    let root_r = psd_sqrt(&sr)?;
    let inner = &root_r * &sg * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = sym_eigen(inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (&mr - &mg).norm_squared() + sr.trace() + sg.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}
