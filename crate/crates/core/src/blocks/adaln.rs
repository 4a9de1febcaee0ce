use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};

use super::linear::Linear;

pub const LN_EPS: f64 = 1e-6;

/// Shift, scale and gate for one sub-layer, one row per token.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub shift: Var,
    pub scale: Var,
    pub gate: Var,
}

/// Timestep modulation: `SiLU(cond)` mapped to `(shift, scale, gate)` for
/// each of `sublayers` sub-layers. The map starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLn {
    pub map: Linear,
    pub dim: usize,
    pub sublayers: usize,
}

impl AdaLn {
    pub fn new(name: &str, cond_dim: usize, dim: usize, sublayers: usize) -> Self {
        Self { map: Linear::new(name, cond_dim, 3 * sublayers * dim, true), dim, sublayers }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.map.init(store, InitRule::Zero, rng)
    }

    /// `cond: [B, cond_dim]`; `rows[i]` is the sample of token row `i`.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, cond: Var, rows: &Arc<[usize]>) -> Result<Vec<Modulation>> {
        let a = g.silu(cond);
        let m = self.map.forward(g, st, a)?;
        let m = g.gather_rows(m, rows.clone())?;
        let d = self.dim;
        (0..self.sublayers)
            .map(|s| {
                let base = 3 * s * d;
                Ok(Modulation { shift: g.slice_cols(m, base, d)?, scale: g.slice_cols(m, base + d, d)?, gate: g.slice_cols(m, base + 2 * d, d)? })
            })
            .collect()
    }

    /// Per sub-layer, the modulated normalized input and the gate, for one
    /// sample `x: [N, D]` and conditioning vector `cond`.
    pub fn modulate_plain(&self, st: &ParamStore, x: &Tensor, cond: &[f64]) -> Result<Vec<(Tensor, Tensor)>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let c = g.constant(Tensor::new(&[1, cond.len()], cond.to_vec())?);
        let rows: Arc<[usize]> = vec![0; x.rows()].into();
        let mods = self.forward(&mut g, st, c, &rows)?;
        mods.iter()
            .map(|m| {
                let h = modulate(&mut g, xv, m)?;
                Ok((g.value(h).clone(), g.value(m.gate).clone()))
            })
            .collect()
    }
}

/// `LN(x)·(1 + scale) + shift` with a parameter-free layer norm.
pub fn modulate(g: &mut Graph, x: Var, m: &Modulation) -> Result<Var> {
    let h = g.layer_norm(x, None, None, LN_EPS)?;
    let hs = g.mul(h, m.scale)?;
    let h = g.add(h, hs)?;
    g.add(h, m.shift)
}

/// `x + gate ⊙ branch`.
pub fn gated_residual(g: &mut Graph, x: Var, branch: Var, gate: Var) -> Result<Var> {
    let b = g.mul(branch, gate)?;
    g.add(x, b)
}
