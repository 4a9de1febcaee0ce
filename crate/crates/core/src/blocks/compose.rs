use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};

use super::linear::Linear;

/// Text-driven rewrite of the image context:
/// `C̃ = C ⊙ (1 + γ) + β`, `C′ = C + (1/r)·C̃·V·Uᵀ`, with `γ, β, U, V` linear
/// in the pooled text vector `g`.
///
/// All four maps are bias-free and zero-initialized. `U` additionally carries
/// a learned, randomly initialized base `U₀` (`U = U₀ + map_U(g)`): with both
/// factors at zero neither could ever receive a gradient. Since `V` stays
/// linear in `g`, the map is the identity at initialization and whenever
/// `g = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvComposer {
    pub name: String,
    pub dim: usize,
    pub rank: usize,
    pub gamma: Linear,
    pub beta: Linear,
    pub u_map: Linear,
    pub v_map: Linear,
}

impl KvComposer {
    pub fn new(name: &str, dim: usize, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("composer rank must be at least 1".into()));
        }
        let lin = |s: &str, out: usize| Linear::new(format!("{name}.{s}"), dim, out, false);
        Ok(Self {
            name: name.to_string(),
            dim,
            rank,
            gamma: lin("gamma", dim),
            beta: lin("beta", dim),
            u_map: lin("u", dim * rank),
            v_map: lin("v", dim * rank),
        })
    }

    pub fn u_base_name(&self) -> String {
        format!("{}.u_base", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in [&self.gamma, &self.beta, &self.u_map, &self.v_map] {
            l.init(store, InitRule::Zero, rng)?;
        }
        store.init(&self.u_base_name(), &[self.dim, self.rank], InitRule::Standard, rng)
    }

    /// `c_img: [ΣL, D]` with sample `b` on rows `offs[b]..offs[b+1]`;
    /// `g: [B, D]`; `rows[i]` is the sample owning context row `i`.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, c_img: Var, gvec: Var, offs: &Arc<[usize]>, rows: &Arc<[usize]>) -> Result<Var> {
        if g.value(c_img).cols() != self.dim || g.value(gvec).cols() != self.dim {
            return Err(shape_err!("composer width {} for context {:?} and g {:?}", self.dim, g.shape(c_img), g.shape(gvec)));
        }
        let gamma = self.gamma.forward(g, st, gvec)?;
        let beta = self.beta.forward(g, st, gvec)?;
        let gamma = g.gather_rows(gamma, rows.clone())?;
        let beta = g.gather_rows(beta, rows.clone())?;
        let scaled = g.mul(c_img, gamma)?;
        let tilde = g.add(c_img, scaled)?;
        let tilde = g.add(tilde, beta)?;
        let u = self.u_map.forward(g, st, gvec)?;
        let u0 = g.param(st, &self.u_base_name())?;
        let u = g.add_row(u, u0)?;
        let v = self.v_map.forward(g, st, gvec)?;
        let low = g.seg_matmul(tilde, v, offs.clone(), self.rank, false)?;
        let upd = g.seg_matmul(low, u, offs.clone(), self.dim, true)?;
        let upd = g.scale(upd, 1.0 / self.rank as f64);
        g.add(c_img, upd)
    }

    /// Evaluates the composer on a single context `[L, D]` and text vector.
    pub fn apply(&self, st: &ParamStore, c_img: &Tensor, gvec: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = g.constant(c_img.clone());
        let gv = g.constant(Tensor::new(&[1, gvec.len()], gvec.to_vec())?);
        let l = c_img.shape()[0];
        let offs: Arc<[usize]> = vec![0, l].into();
        let rows: Arc<[usize]> = vec![0; l].into();
        let out = self.forward(&mut g, st, c, gv, &offs, &rows)?;
        Ok(g.value(out).clone())
    }
}
