use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, InitRule, ParamStore, Segments, Var};

use super::linear::Linear;

/// Multi-head attention with query, key, value and output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let lin = |s: &str| Linear::new(format!("{name}.{s}"), dim, dim, true);
        Ok(Self { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o"), heads })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, InitRule::Standard, rng)?;
        }
        Ok(())
    }

    /// Queries from `x`, keys and values from `ctx`, segment-wise.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, ctx: Var, segs: &Arc<Segments>) -> Result<Var> {
        let q = self.q.forward(g, st, x)?;
        let k = self.k.forward(g, st, ctx)?;
        let v = self.v.forward(g, st, ctx)?;
        let a = g.attention_segments(q, k, v, self.heads, segs.clone())?;
        self.o.forward(g, st, a)
    }
}
