use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::registration::PreservationMask;
use crate::voxel::{DenseGrid, SparseVoxelTensor};

use super::schedule::interpolate;

fn same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `ε − x₀`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same(x0, eps, "velocity target")?;
    Tensor::new(x0.shape(), eps.data().iter().zip(x0.data()).map(|(e, x)| e - x).collect())
}

/// Mean squared error of `v_pred` against `ε − x₀`.
pub fn cfm_loss(v_pred: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<f64> {
    let target = velocity_target(x0, eps)?;
    same(v_pred, &target, "cfm loss")?;
    Ok(v_pred.data().iter().zip(target.data()).map(|(v, t)| (v - t).powi(2)).sum::<f64>() / v_pred.len().max(1) as f64)
}

/// Paired training example. Latents are `[N, C]` row matrices; `mask` holds
/// one weight per row, broadcast across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0_edit: Tensor,
    pub x0_orig: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub mask: Vec<f64>,
}

impl FlowSample {
    pub fn new(x0_edit: Tensor, x0_orig: Tensor, eps: Tensor, t: f64, mask: Vec<f64>) -> Result<Self> {
        same(&x0_edit, &x0_orig, "edited vs original latent")?;
        same(&x0_edit, &eps, "latent vs noise")?;
        if x0_edit.rank() != 2 || mask.len() != x0_edit.rows() {
            return Err(shape_err!("mask of {} rows for latent {:?}", mask.len(), x0_edit.shape()));
        }
        let x_t = interpolate(&x0_edit, &eps, t)?;
        Ok(Self { x0_edit, x0_orig, eps, t, x_t, mask })
    }

    /// Dense latents flattened to `[R³, C]`; the mask must share their resolution.
    pub fn dense(edit: &DenseGrid, orig: &DenseGrid, eps: Tensor, t: f64, mask: &PreservationMask) -> Result<Self> {
        if mask.resolution() != edit.resolution() {
            return Err(shape_err!("mask resolution {} for latent resolution {}", mask.resolution(), edit.resolution()));
        }
        let as_rows = |g: &DenseGrid| Tensor::new(&[g.resolution().pow(3), g.channels()], g.values().to_vec());
        Self::new(as_rows(edit)?, as_rows(orig)?, eps, t, mask.to_weights())
    }

    /// Sparse latents on one shared coordinate set; the mask is read at the
    /// coordinates.
    pub fn sparse(edit: &SparseVoxelTensor, orig: &SparseVoxelTensor, eps: Tensor, t: f64, mask: &PreservationMask) -> Result<Self> {
        if mask.resolution() != edit.resolution() {
            return Err(shape_err!("mask resolution {} for latent resolution {}", mask.resolution(), edit.resolution()));
        }
        if edit.coords() != orig.coords() {
            return Err(shape_err!("edited and original latents sit on different coordinates"));
        }
        let as_rows = |s: &SparseVoxelTensor| Tensor::new(&[s.len(), s.channels()], s.feats().to_vec());
        let w = edit.coords().iter().map(|c| f64::from(u8::from(mask.get(c[0] as usize, c[1] as usize, c[2] as usize)))).collect();
        Self::new(as_rows(edit)?, as_rows(orig)?, eps, t, w)
    }

    pub fn v_edit(&self) -> Result<Tensor> {
        velocity_target(&self.x0_edit, &self.eps)
    }

    pub fn v_orig(&self) -> Result<Tensor> {
        velocity_target(&self.x0_orig, &self.eps)
    }

    /// Row weights expanded to every element.
    pub fn element_mask(&self) -> Arc<[f64]> {
        let c = self.x0_edit.cols();
        self.mask.iter().flat_map(|&w| std::iter::repeat_n(w, c)).collect()
    }
}

/// `mean((v − v_e)²) + mean((ℳ ⊙ (v − v_o))²)`.
pub fn edit_loss(v_pred: &Tensor, sample: &FlowSample) -> Result<f64> {
    same(v_pred, &sample.x0_edit, "edit loss")?;
    let (ve, vo) = (sample.v_edit()?, sample.v_orig()?);
    let m = sample.element_mask();
    let n = v_pred.len().max(1) as f64;
    let a: f64 = v_pred.data().iter().zip(ve.data()).map(|(v, t)| (v - t).powi(2)).sum();
    let b: f64 = v_pred.data().iter().zip(vo.data()).zip(m.iter()).map(|((v, t), w)| (w * (v - t)).powi(2)).sum();
    Ok(a / n + b / n)
}

/// Differentiable [`cfm_loss`].
pub fn cfm_loss_graph(g: &mut Graph, v_pred: Var, x0: &Tensor, eps: &Tensor) -> Result<Var> {
    let target = velocity_target(x0, eps)?;
    g.sq_error(v_pred, &target, None)
}

/// Differentiable [`edit_loss`]; `use_mask = false` drops the second term.
pub fn edit_loss_graph(g: &mut Graph, v_pred: Var, sample: &FlowSample, use_mask: bool) -> Result<Var> {
    let a = g.sq_error(v_pred, &sample.v_edit()?, None)?;
    if !use_mask {
        return Ok(a);
    }
    let b = g.sq_error(v_pred, &sample.v_orig()?, Some(sample.element_mask()))?;
    g.add(a, b)
}
