use std::sync::Arc;

use rand::Rng;

use crate::blocks::Linear;
use crate::error::{shape_err, Error, Result};
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};
use crate::voxel::patch::position_embedding;
use crate::voxel::DenseGrid;

use super::vocab::{EditInstruction, PAD, VOCAB_SIZE};

/// Projections per grid.
pub const VIEWS: usize = 3;
/// Patches per projection side.
pub const VIEW_PATCHES: usize = 4;
/// Image tokens per grid.
pub const IMAGE_TOKENS: usize = VIEWS * VIEW_PATCHES * VIEW_PATCHES;

/// Three orthographic sum-projections of channel 0 (along x, y, z), each
/// normalized by the resolution and cut into 4×4 patches. Returns
/// `[48, (R/4)²]`, view-major then patch row-major.
pub fn encode_image_condition(g: &DenseGrid) -> Result<Tensor> {
    let r = g.resolution();
    if !r.is_multiple_of(VIEW_PATCHES) {
        return Err(shape_err!("resolution {r} is not divisible by {VIEW_PATCHES}"));
    }
    let p = r / VIEW_PATCHES;
    let mut views = vec![vec![0.0; r * r]; VIEWS];
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let v = g.get(x, y, z, 0);
                if v != 0.0 {
                    views[0][y * r + z] += v;
                    views[1][x * r + z] += v;
                    views[2][x * r + y] += v;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(IMAGE_TOKENS * p * p);
    for view in &views {
        for pu in 0..VIEW_PATCHES {
            for pv in 0..VIEW_PATCHES {
                for u in 0..p {
                    for v in 0..p {
                        data.push(view[(pu * p + u) * r + pv * p + v] / r as f64);
                    }
                }
            }
        }
    }
    Tensor::new(&[IMAGE_TOKENS, p * p], data)
}

/// `[view, patch row, patch column]` of each image token.
pub fn image_token_positions() -> Vec<[usize; 3]> {
    (0..VIEWS).flat_map(|v| (0..VIEW_PATCHES).flat_map(move |u| (0..VIEW_PATCHES).map(move |w| [v, u, w]))).collect()
}

/// Non-padding vocabulary ids of an instruction.
pub fn encode_instruction(instr: &EditInstruction) -> Vec<u32> {
    instr.tokens().into_iter().filter(|&t| t != PAD).collect()
}

/// Learned projection of raw image tokens to model width plus a fixed
/// position embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedder {
    pub proj: Linear,
    pub dim: usize,
}

impl ImageEmbedder {
    pub fn new(name: &str, raw_width: usize, dim: usize) -> Self {
        Self { proj: Linear::new(format!("{name}.proj"), raw_width, dim, true), dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.proj.init(store, InitRule::Standard, rng)
    }

    /// `raw: [B·48, w]` for `B` stacked grids.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, raw: Var) -> Result<Var> {
        let rows = g.value(raw).rows();
        if !rows.is_multiple_of(IMAGE_TOKENS) {
            return Err(shape_err!("{rows} image rows are not a multiple of {IMAGE_TOKENS}"));
        }
        let h = self.proj.forward(g, st, raw)?;
        let pe = position_embedding(&image_token_positions(), self.dim);
        let reps = rows / IMAGE_TOKENS;
        let data: Vec<f64> = (0..reps).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::new(&[rows, self.dim], data)?);
        g.add(h, pe)
    }
}

/// Learned `[64, D]` embedding table for instruction tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub name: String,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(name: &str, dim: usize) -> Self {
        Self { name: format!("{name}.table"), dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.init(&self.name, &[VOCAB_SIZE, self.dim], InitRule::Standard, rng)
    }

    fn check(tokens: &[u32]) -> Result<Arc<[usize]>> {
        tokens
            .iter()
            .map(
                |&t| {
                    if (t as usize) < VOCAB_SIZE {
                        Ok(t as usize)
                    } else {
                        Err(Error::Encoding(format!("token {t} outside the {VOCAB_SIZE}-word vocabulary")))
                    }
                },
            )
            .collect()
    }

    /// One embedding row per token.
    pub fn forward(&self, g: &mut Graph, st: &ParamStore, tokens: &[u32]) -> Result<Var> {
        let idx = Self::check(tokens)?;
        let table = g.param(st, &self.name)?;
        g.gather_rows(table, idx)
    }

    pub fn embed(&self, st: &ParamStore, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, st, tokens)?;
        Ok(g.value(v).clone())
    }
}
