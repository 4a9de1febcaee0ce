use rand::Rng;

use crate::error::Result;
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};

use super::linear::Linear;

/// Timesteps are scaled by this before the sinusoid ladder.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of `t ∈ [0, 1]`: cosines then sines over a geometric
/// frequency ladder.
pub fn timestep_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let f = (-MAX_PERIOD.ln() * k as f64 / half as f64).exp();
        let a = t * TIME_SCALE * f;
        out[k] = a.cos();
        out[half + k] = a.sin();
    }
    out
}

/// Sinusoid followed by a two-layer SiLU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedder {
    pub freq_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedder {
    pub fn new(name: &str, freq_dim: usize, dim: usize) -> Self {
        Self { freq_dim, fc1: Linear::new(format!("{name}.fc1"), freq_dim, dim, true), fc2: Linear::new(format!("{name}.fc2"), dim, dim, true) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, InitRule::Standard, rng)?;
        self.fc2.init(store, InitRule::Standard, rng)
    }

    /// One conditioning row per timestep.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, ts: &[f64]) -> Result<Var> {
        let data = ts.iter().flat_map(|&t| timestep_embedding(t, self.freq_dim)).collect();
        let x = g.constant(Tensor::new(&[ts.len(), self.freq_dim], data)?);
        let h = self.fc1.forward(g, st, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, st, h)
    }
}
